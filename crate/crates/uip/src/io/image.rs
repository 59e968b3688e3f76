//! Plain-text PPM (P3) / PGM (P2) dumps of recovered features.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Write a `[3,h,w]` tensor as PPM (P3) or a `[1,h,w]` tensor as PGM (P2),
/// 255 max value; inputs are clamped to [0,1] before quantization.
pub fn write_image(tensor: &Tensor, path: &Path) -> Result<()> {
    let text = render_image(tensor)?;
    fs::write(path, text)?;
    Ok(())
}

fn render_image(tensor: &Tensor) -> Result<String> {
    let &[ch, h, w] = tensor.shape() else {
        return Err(Error::ShapeMismatch {
            expected: vec![0, 0, 0],
            got: tensor.shape().to_vec(),
        });
    };
    let quant = |v: f64| -> u32 { (v.clamp(0.0, 1.0) * 255.0).round() as u32 };
    let data = tensor.data();
    let mut out = String::new();
    match ch {
        1 => {
            let _ = writeln!(out, "P2\n{w} {h}\n255");
            for y in 0..h {
                let row: Vec<String> =
                    (0..w).map(|x| quant(data[y * w + x]).to_string()).collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
        3 => {
            let _ = writeln!(out, "P3\n{w} {h}\n255");
            let plane = h * w;
            for y in 0..h {
                let mut row = Vec::with_capacity(3 * w);
                for x in 0..w {
                    for c in 0..3 {
                        row.push(quant(data[c * plane + y * w + x]).to_string());
                    }
                }
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "can only dump 1- or 3-channel images, got {other} channels"
            )));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_golden() {
        let t = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.5, 2.0]).unwrap();
        // 2.0 clamps to 1.0 -> 255
        assert_eq!(render_image(&t).unwrap(), "P2\n2 2\n255\n0 255\n128 255\n");
    }

    #[test]
    fn ppm_golden() {
        let mut data = vec![0.0; 12];
        data[0] = 1.0; // R of pixel (0,0)
        data[4 + 1] = 1.0; // G of pixel (0,1)
        let t = Tensor::new(vec![3, 2, 2], data).unwrap();
        assert_eq!(
            render_image(&t).unwrap(),
            "P3\n2 2\n255\n255 0 0 0 255 0\n0 0 0 0 0 0\n"
        );
    }

    #[test]
    fn rejects_other_channel_counts() {
        let t = Tensor::new(vec![2, 2, 2], vec![0.0; 8]).unwrap();
        assert!(write_image(&t, Path::new("/dev/null")).is_err());
        let flat = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        assert!(write_image(&flat, Path::new("/dev/null")).is_err());
    }
}
