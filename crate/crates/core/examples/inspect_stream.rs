//! Builds a small stream by hand and prints its layout.

use sct_codec::bitstream::{self, bitrate_report, SctHeader, HEADER_LEN};
use sct_codec::eval::bit_histogram;
use sct_codec::mask::decoder_mask_from_codes;
use sct_codec::CodeTensor;

fn main() -> sct_codec::Result<()> {
    // 2 x 3 tiles, 8 bits each, 3 iterations
    let (th, tw, depth) = (2, 3, 8);
    let mut codes = Vec::new();
    for k in 1..=3 {
        let mut c = CodeTensor::zeros(th, tw, depth, k);
        for t in 0..th * tw {
            // tile t sends stop codes from iteration t + 1 on
            if k <= t {
                c.tile_mut(t)[(t + k) % depth] = 1;
            }
        }
        codes.push(c);
    }
    let masks = decoder_mask_from_codes(&codes);
    let header = SctHeader::new(8, 12, 3, depth, 4, true, 42)?;
    let stream = bitstream::write(&codes, &masks, header)?;

    println!("header: {HEADER_LEN} bytes {:02x?}", header.to_bytes());
    for (i, p) in stream.payloads.iter().enumerate() {
        println!(
            "iteration {}: {} bytes {:02x?}, stopped {:?}",
            i + 1,
            p.len(),
            p,
            masks[i].first_stops()
        );
    }
    let h = bit_histogram(&codes, &masks);
    println!("zeros {:?} ones {:?}", h.zeros, h.ones);
    let r = bitrate_report(&stream);
    println!(
        "nominal {:.3} bpp, trimmed {:.3} bpp, compressed {:.3} bpp",
        r.nominal_bpp, r.trimmed_bpp, r.compressed_bpp
    );
    Ok(())
}
