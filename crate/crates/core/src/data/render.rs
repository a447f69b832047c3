use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::font::{rasterize, text_dots, GLYPH_ROWS};
use super::Distortion;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest and largest pixels-per-dot used when drawing parameters.
pub const MIN_SCALE: usize = 3;
pub const MAX_SCALE: usize = 4;
pub const MAX_TILT_DEG: f64 = 35.0;
pub const NOISE_SIGMA: f64 = 0.05;
/// Tilted samples use at least this rotation when the canvas allows it.
const MIN_TILT_DEG: f64 = 10.0;

/// Geometry and photometry of one rendered sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderParams {
    /// Pixels per font dot.
    pub scale: usize,
    /// Whole-word rotation in degrees (tilted).
    pub angle_deg: f64,
    /// Baseline displacement `A·sin(2πu/λ + φ)` in pixels (curved).
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
    /// Canvas position `(x, y)` of the text block's center.
    pub center: (f64, f64),
    /// Intensities in `[0, 1]`.
    pub ink: f64,
    pub background: f64,
    pub noise_sigma: f64,
}

impl RenderParams {
    /// Undistorted, noise-free text centered on `canvas`.
    pub fn plain(scale: usize, canvas: (usize, usize)) -> Self {
        RenderParams {
            scale,
            angle_deg: 0.0,
            amplitude: 0.0,
            period: 1.0,
            phase: 0.0,
            center: (canvas.0 as f64 / 2.0, canvas.1 as f64 / 2.0),
            ink: 0.0,
            background: 1.0,
            noise_sigma: 0.0,
        }
    }
}

/// One rendered image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `[1, H, W]`, values in `[-1, 1]` on the 8-bit grid.
    pub image: Tensor<f32>,
    pub text: String,
    pub distortion: Distortion,
    pub params: RenderParams,
    pub seed: u64,
}

/// Half-extents `(x, y)` of the inked region around the block center.
fn half_extent(dots: usize, d: Distortion, p: &RenderParams) -> (f64, f64) {
    let w = (dots * p.scale) as f64 / 2.0;
    let h = (GLYPH_ROWS * p.scale) as f64 / 2.0;
    match d {
        Distortion::Regular => (w, h),
        Distortion::Curved => (w, h + p.amplitude.abs()),
        Distortion::Tilted => {
            let t = p.angle_deg.to_radians();
            let (s, c) = (t.sin().abs(), t.cos().abs());
            (w * c + h * s, w * s + h * c)
        }
    }
}

fn fits(dots: usize, d: Distortion, p: &RenderParams, canvas: (usize, usize)) -> bool {
    let (hx, hy) = half_extent(dots, d, p);
    2.0 * hx <= canvas.0 as f64 && 2.0 * hy <= canvas.1 as f64
}

/// Render `text` with explicit parameters. Noise is drawn from `noise_seed`.
pub fn render_sample_with(
    text: &str,
    distortion: Distortion,
    params: &RenderParams,
    canvas: (usize, usize),
    noise_seed: u64,
) -> Result<SyntheticSample> {
    if text.is_empty() {
        return Err(Error::Config("cannot render an empty label".into()));
    }
    if let Some(ch) = text.chars().find(|&c| super::font::glyph(c).is_none()) {
        return Err(Error::Charset(ch));
    }
    let (cw, ch) = canvas;
    let p = params;
    if p.scale == 0 {
        return Err(Error::Config("glyph scale must be positive".into()));
    }
    if p.angle_deg.abs() > MAX_TILT_DEG {
        return Err(Error::Config(format!(
            "rotation {}° outside ±{MAX_TILT_DEG}°",
            p.angle_deg
        )));
    }
    if p.amplitude.abs() > ch as f64 / 4.0 {
        return Err(Error::Fit(format!(
            "curve amplitude {} exceeds a quarter of the height {ch}",
            p.amplitude
        )));
    }
    let (dots, bits) = rasterize(text).expect("glyphs checked above");
    let (hx, hy) = half_extent(dots, distortion, p);
    let (cx, cy) = p.center;
    if cx - hx < 0.0 || cy - hy < 0.0 || cx + hx > cw as f64 || cy + hy > ch as f64 {
        return Err(Error::Fit(format!(
            "{:?} {text:?} at scale {} needs {:.0}x{:.0} around ({cx:.1},{cy:.1}) on {cw}x{ch}",
            distortion,
            p.scale,
            2.0 * hx,
            2.0 * hy
        )));
    }
    let s = p.scale as f64;
    let (bw, bh) = (dots as f64 * s, GLYPH_ROWS as f64 * s);
    let theta = match distortion {
        Distortion::Tilted => p.angle_deg.to_radians(),
        _ => 0.0,
    };
    let (sin, cos) = theta.sin_cos();
    let amp = match distortion {
        Distortion::Curved => p.amplitude,
        _ => 0.0,
    };
    let inked = |x: f64, y: f64| -> bool {
        let (dx, dy) = (x - cx, y - cy);
        let mut u = dx * cos + dy * sin;
        let mut v = -dx * sin + dy * cos;
        u += bw / 2.0;
        if amp != 0.0 {
            v -= amp * (2.0 * PI * u / p.period + p.phase).sin();
        }
        v += bh / 2.0;
        if u < 0.0 || v < 0.0 || u >= bw || v >= bh {
            return false;
        }
        bits[(v / s) as usize * dots + (u / s) as usize]
    };
    const SUB: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0, p.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(cw * ch);
    for y in 0..ch {
        for x in 0..cw {
            let mut hits = 0;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let px = x as f64 + (sx as f64 + 0.5) / SUB as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SUB as f64;
                    hits += inked(px, py) as usize;
                }
            }
            let cover = hits as f64 / (SUB * SUB) as f64;
            let mut v = p.background + (p.ink - p.background) * cover;
            if p.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            let q = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            data.push((2.0 * q - 1.0) as f32);
        }
    }
    Ok(SyntheticSample {
        image: Tensor::from_data(&[1, ch, cw], data)?,
        text: text.to_string(),
        distortion,
        params: params.clone(),
        seed: noise_seed,
    })
}

/// Render `text` with parameters drawn from `seed`: scale in
/// `[MIN_SCALE, MAX_SCALE]` (lower only when the text would not fit), curve amplitude up to a quarter of the height,
/// rotation within ±35°, random placement, dark ink on a light background.
pub fn render_sample(
    text: &str,
    distortion: Distortion,
    seed: u64,
    canvas: (usize, usize),
) -> Result<SyntheticSample> {
    let n = text.chars().count();
    if n == 0 {
        return Err(Error::Config("cannot render an empty label".into()));
    }
    let dots = text_dots(n);
    let (cw, ch) = canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = RenderParams::plain(MIN_SCALE, canvas);
    // Long labels on small canvases drop below the minimum scale.
    let base = (1..=MIN_SCALE)
        .rev()
        .find(|&s| {
            p.scale = s;
            fits(dots, distortion, &p, canvas)
        })
        .ok_or_else(|| Error::Fit(format!("{n} glyphs do not fit {cw}x{ch} at scale 1")))?;
    p.scale = base;
    let fit_err = || Error::Fit(format!("{n} glyphs do not fit {cw}x{ch} at scale {base}"));
    if let Distortion::Tilted = distortion {
        // Largest rotation that still fits at the minimum scale.
        let max = (0..=(MAX_TILT_DEG * 2.0) as usize)
            .rev()
            .map(|h| h as f64 / 2.0)
            .find(|&a| {
                p.angle_deg = a;
                fits(dots, distortion, &p, canvas)
            })
            .ok_or_else(fit_err)?;
        let lo = MIN_TILT_DEG.min(max);
        let mag = if max > lo { rng.gen_range(lo..=max) } else { max };
        p.angle_deg = if rng.gen::<bool>() { mag } else { -mag };
    }
    if !fits(dots, distortion, &p, canvas) {
        return Err(fit_err());
    }
    let s_max = (base..=MAX_SCALE)
        .rev()
        .find(|&s| {
            let mut q = p.clone();
            q.scale = s;
            fits(dots, distortion, &q, canvas)
        })
        .unwrap_or(base);
    p.scale = rng.gen_range(base..=s_max);
    if let Distortion::Curved = distortion {
        let bh = (GLYPH_ROWS * p.scale) as f64;
        let a_max = (ch as f64 / 4.0).min((ch as f64 - bh) / 2.0);
        p.amplitude = if a_max > 0.0 {
            rng.gen_range(0.4 * a_max..=a_max)
        } else {
            0.0
        };
        // Keep the steepest baseline slope 2πA/λ at or below 1.
        let span = ((dots * p.scale) as f64).max(64.0).max(2.0 * PI * p.amplitude / 0.75);
        p.period = rng.gen_range(0.75 * span..=1.5 * span);
        p.phase = rng.gen_range(0.0..2.0 * PI);
    }
    let (hx, hy) = half_extent(dots, distortion, &p);
    let jitter = |half: f64, extent: usize, rng: &mut ChaCha8Rng| {
        let (lo, hi) = (half, extent as f64 - half);
        if hi > lo {
            rng.gen_range(lo..=hi)
        } else {
            extent as f64 / 2.0
        }
    };
    p.center = (jitter(hx, cw, &mut rng), jitter(hy, ch, &mut rng));
    p.background = rng.gen_range(0.6..=1.0);
    p.ink = rng.gen_range(0.0..=0.35);
    p.noise_sigma = NOISE_SIGMA;
    let mut sample = render_sample_with(text, distortion, &p, canvas, rng.gen())?;
    sample.seed = seed;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CANVAS: (usize, usize) = (200, 64);

    fn column(img: &Tensor<f32>, x: usize) -> Vec<f64> {
        let (_, h, w) = img.dims3().unwrap();
        (0..h).map(|y| 1.0 - img.data()[y * w + x] as f64).collect()
    }

    #[test]
    fn regular_glyphs_are_evenly_spaced() {
        let p = RenderParams::plain(3, CANVAS);
        let s = render_sample_with("1111", Distortion::Regular, &p, CANVAS, 0).unwrap();
        // Stem columns of each '1': block starts at 100 - 23*3/2 = 65.5.
        let stems: Vec<usize> = (0..CANVAS.0)
            .filter(|&x| column(&s.image, x).iter().filter(|&&v| v > 1.0).count() >= 18)
            .collect();
        let starts: Vec<usize> = stems
            .iter()
            .copied()
            .filter(|&x| !stems.contains(&(x.wrapping_sub(1))))
            .collect();
        assert_eq!(starts.len(), 4);
        let gaps: Vec<usize> = starts.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(gaps.iter().all(|&g| g == 18), "{gaps:?}");
    }

    #[test]
    fn deterministic_per_seed() {
        for d in [Distortion::Regular, Distortion::Curved, Distortion::Tilted] {
            let a = render_sample("40719", d, 11, CANVAS).unwrap();
            let b = render_sample("40719", d, 11, CANVAS).unwrap();
            assert_eq!(a, b);
            let c = render_sample("40719", d, 12, CANVAS).unwrap();
            assert_ne!(a.image, c.image);
        }
    }

    #[test]
    fn drawn_parameters_respect_bounds() {
        for seed in 0..200 {
            let text = &"8765432109"[..1 + (seed as usize % 8)];
            let t = render_sample(text, Distortion::Tilted, seed, CANVAS).unwrap();
            assert!(t.params.angle_deg.abs() <= MAX_TILT_DEG);
            let c = render_sample(text, Distortion::Curved, seed, CANVAS).unwrap();
            assert!(c.params.amplitude <= 16.0 && c.params.amplitude > 0.0);
            assert!((MIN_SCALE..=MAX_SCALE).contains(&c.params.scale));
            assert!(t.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn small_canvas_drops_below_min_scale() {
        for d in Distortion::ALL {
            let s = render_sample("12345", d, 4, (64, 32)).unwrap();
            assert!(s.params.scale < MIN_SCALE, "{d}: {}", s.params.scale);
        }
        let s = render_sample("12", Distortion::Regular, 4, (64, 32)).unwrap();
        assert!(s.params.scale >= MIN_SCALE);
    }

    #[test]
    fn fit_errors() {
        let mut p = RenderParams::plain(2, (200, 32));
        p.angle_deg = 35.0;
        let word = "12345678901234";
        assert!(matches!(
            render_sample_with(word, Distortion::Tilted, &p, (200, 32), 0),
            Err(Error::Fit(_))
        ));
        assert!(matches!(
            render_sample(&"9".repeat(40), Distortion::Regular, 0, CANVAS),
            Err(Error::Fit(_))
        ));
        let mut p = RenderParams::plain(2, CANVAS);
        p.amplitude = 17.0;
        assert!(matches!(
            render_sample_with("12", Distortion::Curved, &p, CANVAS, 0),
            Err(Error::Fit(_))
        ));
        assert!(matches!(
            render_sample_with("1é", Distortion::Regular, &RenderParams::plain(2, CANVAS), CANVAS, 0),
            Err(Error::Charset('é'))
        ));
    }

    /// Vertical shift of each inked column of `curved` against the same
    /// text drawn flat, by cross-correlation.
    fn column_shifts(flat: &Tensor<f32>, curved: &Tensor<f32>) -> Vec<i64> {
        let (_, h, w) = flat.dims3().unwrap();
        let mut out = Vec::new();
        for x in 0..w {
            let (a, b) = (column(flat, x), column(curved, x));
            if a.iter().sum::<f64>() < 2.0 {
                continue;
            }
            let h = h as i64;
            let best = (-h + 1..h)
                .max_by(|&d1, &d2| {
                    let score = |d: i64| -> f64 {
                        (0..h)
                            .filter(|&y| (0..h).contains(&(y + d)))
                            .map(|y| a[y as usize] * b[(y + d) as usize])
                            .sum()
                    };
                    score(d1).partial_cmp(&score(d2)).unwrap()
                })
                .unwrap();
            out.push(best);
        }
        out
    }

    #[test]
    fn curve_displacement_matches_amplitude() {
        for (amp, period) in [(16.0, 120.0), (9.5, 80.0), (4.0, 150.0)] {
            let mut p = RenderParams::plain(2, CANVAS);
            let flat = render_sample_with("80808080", Distortion::Regular, &p, CANVAS, 0).unwrap();
            p.amplitude = amp;
            p.period = period;
            let curved = render_sample_with("80808080", Distortion::Curved, &p, CANVAS, 0).unwrap();
            let shifts = column_shifts(&flat.image, &curved.image);
            let max = shifts.iter().map(|d| d.abs()).max().unwrap() as f64;
            assert!((max - amp).abs() <= 1.0, "amp {amp}: measured {max}");
        }
    }
}
