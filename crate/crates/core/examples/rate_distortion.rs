//! Rate-distortion table and savings decomposition over the synthetic set.
//!
//! ```text
//! cargo run --release --example rate_distortion -- [checkpoint.sctc] [threshold]
//! ```

use std::path::Path;

use sct_codec::dataset::Dataset;
use sct_codec::eval::{evaluate_image, rd_points_csv, savings_decomposition};
use sct_codec::{checkpoint, CodecConfig, EncodeOptions, Model};

fn main() -> sct_codec::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = match args.next() {
        Some(path) => checkpoint::load(Path::new(&path), None)?.model,
        None => Model::new(CodecConfig::toy(), 0)?,
    };
    let threshold = args.next().and_then(|s| s.parse().ok()).unwrap_or(12.0);
    let data = Dataset::synthetic(5, 64, 11)?;
    let opts = EncodeOptions {
        threshold,
        iterations: model.config().max_iterations,
        sct: true,
    };
    let mut points = Vec::new();
    for i in 0..data.len() {
        let ev = evaluate_image(&model, &format!("img{i}"), data.tensor(i), &opts)?;
        let s = savings_decomposition(&ev.stream);
        println!(
            "img{i}: trimming saves {:.1}%, entropy coding {:.1}%, total {:.1}%",
            s.trim_pct, s.lz_pct, s.total_pct
        );
        points.extend(ev.points);
    }
    print!("{}", rd_points_csv(&points));
    Ok(())
}
