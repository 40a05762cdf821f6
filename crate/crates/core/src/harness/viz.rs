//! Keypoint overlays: per-frame PPM images with the selected points
//! marked, PGM heatmaps and a `t,y,x,score` point dump.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::dataset::Clip;
use crate::harness::eval::run_stage2;
use crate::model::AkNet;

const MARK: [u8; 3] = [255, 32, 32];

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (`P6`) from row-major RGB bytes.
pub fn ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Binary PGM (`P5`) from row-major grey bytes.
pub fn pgm(width: usize, height: usize, grey: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(grey);
    out
}

/// Writes `frame_TT.ppm`, `heatmap_TT.pgm` and `points.txt` into `out`
/// and returns the written paths.
pub fn visualize(ck: &Checkpoint, clip: &Clip, out: &Path) -> Result<Vec<PathBuf>> {
    if ck.stage != 2 {
        return Err(Error::Config("visualisation needs a stage-2 checkpoint".into()));
    }
    let net = AkNet::new(ck.model.clone())?;
    let eval = run_stage2(&net, &ck.params, clip)?;
    let (c, t, h, w) = clip.shape();
    let (_, gh, gw) = eval.points.extent;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let frames = clip.frames.data();
    for f in 0..t {
        let mut rgb = vec![0u8; h * w * 3];
        for p in 0..h * w {
            for ch in 0..3 {
                // Grey clips repeat their single channel.
                let src = ch.min(c - 1);
                rgb[p * 3 + ch] = to_byte(frames[(src * t + f) * h * w + p]);
            }
        }
        // Each grid cell covers a block of input pixels; outline it.
        for pt in eval.points.coords.iter().filter(|p| p.t == f) {
            let (y0, y1) = (pt.y * h / gh, ((pt.y + 1) * h / gh).max(pt.y * h / gh + 1));
            let (x0, x1) = (pt.x * w / gw, ((pt.x + 1) * w / gw).max(pt.x * w / gw + 1));
            for y in y0..y1 {
                for x in x0..x1 {
                    let edge = y == y0 || y + 1 == y1 || x == x0 || x + 1 == x1;
                    if edge {
                        rgb[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&MARK);
                    }
                }
            }
        }
        let path = out.join(format!("frame_{f:02}.ppm"));
        fs::write(&path, ppm(w, h, &rgb))?;
        written.push(path);

        let grey: Vec<u8> = (0..h * w)
            .map(|p| {
                let (y, x) = (p / w * gh / h, p % w * gw / w);
                to_byte(eval.heatmap[(f * gh + y) * gw + x])
            })
            .collect();
        let path = out.join(format!("heatmap_{f:02}.pgm"));
        fs::write(&path, pgm(w, h, &grey))?;
        written.push(path);
    }
    let path = out.join("points.txt");
    fs::write(&path, eval.points.dump())?;
    written.push(path);
    Ok(written)
}
