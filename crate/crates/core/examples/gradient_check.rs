//! Compares analytic gradients with central differences for a ConvLSTM
//! step followed by depth-to-space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sct_codec::gradcheck::{check, project, random_tensor};
use sct_codec::layers::{conv_lstm_step, ConvLstmWeights, LstmVars};

fn main() -> Result<(), sct_codec::error::TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let inputs = vec![
        random_tensor(&[1, 4, 4, 3], -1.0, 1.0, &mut rng),
        random_tensor(&[1, 4, 4, 4], -1.0, 1.0, &mut rng),
        random_tensor(&[1, 4, 4, 4], -1.0, 1.0, &mut rng),
        random_tensor(&[3, 3, 3, 16], -0.5, 0.5, &mut rng),
        random_tensor(&[16], -0.5, 0.5, &mut rng),
        random_tensor(&[1, 1, 4, 16], -0.5, 0.5, &mut rng),
    ];
    let report = check(&inputs, 1e-5, |g, v| {
        let w = ConvLstmWeights {
            input_weight: v[3],
            bias: v[4],
            hidden_weight: v[5],
            stride: 1,
        };
        let state = LstmVars {
            hidden: v[1],
            cell: v[2],
        };
        let (h, _) = conv_lstm_step(g, v[0], state, &w)?;
        let up = g.depth_to_space(h, 2)?;
        project(g, up, 1)
    })?;
    println!(
        "{} partial derivatives, max relative error {:.2e}, max absolute error {:.2e}",
        report.checked, report.max_relative_error, report.max_absolute_error
    );
    Ok(())
}
