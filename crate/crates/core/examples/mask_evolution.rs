//! Renders the stop mask over iterations for a half-flat, half-noise image.
//!
//! ```text
//! cargo run --release --example mask_evolution -- [checkpoint.sctc] [out_dir]
//! ```

use std::path::{Path, PathBuf};

use sct_codec::dataset::half_flat_half_noise;
use sct_codec::eval::{mask_evolution_render, MASK_COLOR};
use sct_codec::image::save_image;
use sct_codec::{checkpoint, CodecConfig, EncodeOptions, Model};

fn main() -> sct_codec::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = match args.next() {
        Some(path) => checkpoint::load(Path::new(&path), None)?.model,
        None => Model::new(CodecConfig::toy(), 0)?,
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "mask-frames".into()));
    std::fs::create_dir_all(&out).map_err(|source| sct_codec::Error::Path {
        path: out.clone(),
        source,
    })?;

    let image = half_flat_half_noise(128, 64, 5);
    save_image(&out.join("input.ppm"), &image)?;
    let enc = model.full_encode(
        &image.to_tensor::<f32>(),
        &EncodeOptions {
            threshold: 16.0,
            iterations: model.config().max_iterations,
            sct: true,
        },
    )?;
    let frames = mask_evolution_render(
        &enc.masks,
        &enc.reconstructions,
        model.config().tile_size,
        enc.true_h,
        enc.true_w,
        MASK_COLOR,
    )?;
    for (k, f) in frames.iter().enumerate() {
        let path = out.join(format!("k{:02}.ppm", k + 1));
        save_image(&path, f)?;
        println!(
            "{}: {:.0}% of tiles stopped",
            path.display(),
            100.0 * enc.masks[k].stopped_fraction()
        );
    }
    Ok(())
}
