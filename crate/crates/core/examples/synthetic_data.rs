//! Generates a few moving-square clips, round-trips one through the AKVD
//! format and prints label, motion and object coverage.

use aknet::harness::dataset::{decode_clip, encode_clip, gen_split, DIRECTIONS};
use aknet::harness::DataConfig;

fn main() -> aknet::Result<()> {
    let cfg = DataConfig {
        train_count: 8,
        ..DataConfig::default()
    };
    cfg.validate()?;
    let clips = gen_split(&cfg, 0, cfg.train_count);
    for (i, c) in clips.iter().enumerate() {
        let (ch, t, h, w) = c.shape();
        println!(
            "clip {i}: {ch}×{t}×{h}×{w}  label {}  direction {:?}  object area {:.3}",
            c.label,
            DIRECTIONS[c.label],
            c.mask_fraction(h, w).unwrap_or(0.0)
        );
    }
    let bytes = encode_clip(&clips[0]);
    let back = decode_clip(&bytes)?;
    println!("AKVD: {} bytes, round trip equal: {}", bytes.len(), back == clips[0]);
    Ok(())
}
