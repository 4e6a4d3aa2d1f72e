use std::path::Path;

use anyhow::{bail, Context};
use bevkit::{bfk, Tensor};
use serde::Deserialize;

/// Which scalar is drawn per cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Channel(usize),
    /// L2 norm over channels.
    Norm,
}

/// Accepted layouts for `--points`: a bare list or `sampling_points.json`.
#[derive(Deserialize)]
#[serde(untagged)]
enum PointsFile {
    List(Vec<[f64; 2]>),
    Record { points: Vec<[f64; 2]> },
}

/// Grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

pub fn render(t: &Tensor, reduce: Reduce) -> anyhow::Result<Gray> {
    let (c, h, w) = t.chw().context("expected a rank-3 [C, H, W] tensor")?;
    let values: Vec<f64> = match reduce {
        Reduce::Channel(ch) if ch >= c => bail!("channel {ch} out of range for {c} channels"),
        Reduce::Channel(ch) => t.data()[ch * h * w..(ch + 1) * h * w].to_vec(),
        Reduce::Norm => (0..h * w)
            .map(|i| (0..c).map(|k| t.data()[k * h * w + i].powi(2)).sum::<f64>().sqrt())
            .collect(),
    };
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(*x), hi.max(*x)));
    let pixels = if hi > lo {
        values
            .iter()
            .map(|x| ((x - lo) / (hi - lo) * 255.0).round() as u8)
            .collect()
    } else {
        vec![128; h * w]
    };
    Ok(Gray {
        width: w,
        height: h,
        pixels,
    })
}

/// Marks `[x, y]` cell coordinates as white pixels; points off the image are skipped.
pub fn overlay(img: &mut Gray, points: &[[f64; 2]]) {
    for [x, y] in points {
        let (u, v) = (x.round(), y.round());
        if u >= 0.0 && v >= 0.0 && (u as usize) < img.width && (v as usize) < img.height {
            img.pixels[v as usize * img.width + u as usize] = 255;
        }
    }
}

pub fn load_points(path: &Path) -> anyhow::Result<Vec<[f64; 2]>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed: PointsFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(match parsed {
        PointsFile::List(p) | PointsFile::Record { points: p } => p,
    })
}

/// Loads and renders the inputs; any failure here means a bad input file.
pub fn prepare(tensor: &Path, reduce: Reduce, points: Option<&Path>) -> anyhow::Result<Gray> {
    let t = bfk::load(tensor).with_context(|| format!("loading {}", tensor.display()))?;
    let mut img = render(&t, reduce)?;
    if let Some(p) = points {
        overlay(&mut img, &load_points(p)?);
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_is_mid_gray() {
        let img = render(&Tensor::full(&[2, 3, 4], 0.7), Reduce::Norm).unwrap();
        assert_eq!((img.width, img.height), (4, 3));
        assert!(img.pixels.iter().all(|p| *p == 128));
    }

    #[test]
    fn delta_is_single_white_pixel() {
        let mut t = Tensor::zeros(&[3, 5, 6]);
        t.set3(1, 2, 4, -3.0);
        let img = render(&t, Reduce::Norm).unwrap();
        let white: Vec<usize> = (0..30).filter(|i| img.pixels[*i] == 255).collect();
        assert_eq!(white, vec![2 * 6 + 4]);
        assert_eq!(img.pixels.iter().filter(|p| **p == 0).count(), 29);
        // on channel 1 the delta is the minimum
        let img = render(&t, Reduce::Channel(1)).unwrap();
        assert_eq!(img.pixels[2 * 6 + 4], 0);
    }

    #[test]
    fn channel_out_of_range_and_wrong_rank_fail() {
        assert!(render(&Tensor::zeros(&[2, 3, 3]), Reduce::Channel(2)).is_err());
        assert!(render(&Tensor::zeros(&[3, 3]), Reduce::Norm).is_err());
    }

    #[test]
    fn pgm_header_and_overlay() {
        let mut img = render(&Tensor::zeros(&[1, 2, 3]), Reduce::Norm).unwrap();
        overlay(&mut img, &[[2.2, 0.9], [-1.0, 0.0], [7.0, 1.0]]);
        let pgm = img.to_pgm();
        assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&pgm[11..], &[128, 128, 128, 128, 128, 255]);
    }
}
