//! Trains the toy codec on the built-in synthetic images and saves a
//! checkpoint.
//!
//! ```text
//! cargo run --release --example train_toy -- [steps] [out.sctc]
//! ```

use std::path::PathBuf;

use sct_codec::checkpoint;
use sct_codec::dataset::{Dataset, DatasetSpec};
use sct_codec::train::{LossConfig, TrainConfig, Trainer};
use sct_codec::{CodecConfig, Model};

fn main() -> sct_codec::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "toy.sctc".into()));

    let data = Dataset::load(&DatasetSpec::default())?;
    let train = TrainConfig {
        steps,
        learning_rate: 1e-3,
        seed: 3,
        ..TrainConfig::default()
    };
    let model = Model::new(CodecConfig::toy(), train.seed)?;
    println!("{} parameters", model.param_count());
    let mut trainer = Trainer::new(model, train, LossConfig::default())?;
    for _ in 0..steps {
        let s = trainer.step(&data)?;
        if s.step % 25 == 0 || s.step == 1 {
            println!(
                "step {:4}  natural {:.4}  forced {:.4}  penalty {:.4}  zero bits {:.3}",
                s.step, s.natural_l1, s.forced_l1, s.bit_penalty, s.zero_bit_fraction
            );
        }
    }
    checkpoint::save(&out, &trainer.model, Some(&trainer.optimizer))?;
    println!("saved {}", out.display());
    Ok(())
}
