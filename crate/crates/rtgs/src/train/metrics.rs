//! Image quality metrics and the per-step loss log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::img::{Image, Map};
use crate::loss::{ssim_forward, LossBreakdown};

/// PSNR reported for an exact match.
pub const PSNR_CAP: f64 = 99.0;

pub fn mse(a: &Map, b: &Map) -> f64 {
    assert_eq!(a.data.len(), b.data.len(), "metric shape mismatch");
    let sum: f64 = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    sum / a.data.len() as f64
}

/// Peak signal-to-noise ratio against a unit peak, capped at [`PSNR_CAP`].
pub fn psnr(a: &Map, b: &Map) -> f64 {
    let m = mse(a, b);
    if m <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
    }
}

/// PSNR restricted to mask-covered pixels; `None` when the mask is empty.
pub fn masked_psnr(a: &Map, b: &Map, mask: &Image) -> Option<f64> {
    assert_eq!(a.width, mask.width, "metric shape mismatch");
    assert_eq!(a.height, mask.height, "metric shape mismatch");
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..a.height {
        for x in 0..a.width {
            if mask.get(x, y, 0) <= 0.5 {
                continue;
            }
            for c in 0..a.channels {
                let d = a.get(x, y, c) - b.get(x, y, c);
                sum += d * d;
            }
            n += a.channels;
        }
    }
    if n == 0 {
        return None;
    }
    let m = sum / n as f64;
    Some(if m <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
    })
}

/// PSNR and mean SSIM of a rendered view against its target.
pub fn eval_metrics(render: &Map, target: &Map) -> (f64, f64) {
    (psnr(render, target), ssim_forward(render, target).mean)
}

/// Streaming CSV writer for the per-step loss terms.
pub struct LossLog {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = LossLog {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        log.write_line("step,rgb,spec,depth,normal,mono,grad,total")?;
        Ok(log)
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn append(&mut self, step: usize, b: &LossBreakdown) -> Result<()> {
        self.write_line(&format!(
            "{step},{},{},{},{},{},{},{}",
            b.rgb, b.spec, b.depth, b.normal, b.mono, b.grad, b.total
        ))
    }

    pub fn finish(mut self) -> Result<()> {
        use std::io::Write as _;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
