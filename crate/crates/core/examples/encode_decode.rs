//! Encodes a synthetic image, writes the raw and compressed streams, and
//! decodes every iteration prefix.
//!
//! ```text
//! cargo run --release --example encode_decode -- [checkpoint.sctc]
//! ```

use std::path::Path;

use sct_codec::bitstream::{self, bitrate_report, SctHeader};
use sct_codec::dataset::synthetic_image;
use sct_codec::dataset::Pattern;
use sct_codec::eval::psnr;
use sct_codec::{checkpoint, CodecConfig, EncodeOptions, Model};

fn main() -> sct_codec::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => checkpoint::load(Path::new(&path), None)?.model,
        None => {
            println!("no checkpoint given, using an untrained toy model");
            Model::new(CodecConfig::toy(), 0)?
        }
    };
    let image = synthetic_image(Pattern::Quadrants, 96, 7).to_tensor::<f32>();
    let opts = EncodeOptions {
        threshold: 12.0,
        iterations: model.config().max_iterations,
        sct: true,
    };
    let enc = model.full_encode(&image, &opts)?;
    let cfg = model.config();
    let header = SctHeader::new(
        enc.true_h,
        enc.true_w,
        opts.iterations,
        cfg.code_depth,
        cfg.tile_size,
        opts.sct,
        cfg.hash(),
    )?;
    let stream = bitstream::write(&enc.codes, &enc.masks, header)?;
    let raw = stream.to_bytes();
    let dz = bitstream::compress(&stream);
    println!("{} bytes raw, {} bytes compressed", raw.len(), dz.len());

    let parsed = bitstream::parse_any(&dz)?;
    for k in 1..=opts.iterations {
        let prefix = parsed.truncated(k)?;
        let (codes, masks) = bitstream::read(&prefix)?;
        let recon = model.reconstruct(&codes, &masks)?;
        let out = sct_codec::net::crop(recon.last().unwrap(), enc.true_h, enc.true_w)?;
        let r = bitrate_report(&prefix);
        println!(
            "k={k}: {:.2} dB, nominal {:.4} bpp, trimmed {:.4} bpp, {} tiles stopped",
            psnr(&image, &out)?,
            r.nominal_bpp,
            r.trimmed_bpp,
            masks.last().unwrap().count_stopped()
        );
    }
    Ok(())
}
