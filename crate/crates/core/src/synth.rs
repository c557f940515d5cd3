//! Seeded synthetic infrared scenes: value-noise clutter plus white noise,
//! with small Gaussian targets and exact half-peak masks.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{connected_components, snr_of_target, BinaryMask};
use crate::pgm::Pgm;
use crate::tensor::{Shape, Tensor};

/// Largest target spread; targets stay a few pixels wide.
pub const MAX_SIGMA: f64 = 3.0;

/// Placement attempts per target before generation fails.
pub const MAX_RETRIES: usize = 200;

/// Radius of the region where a Gaussian exceeds half its peak.
pub fn half_peak_radius(sigma: f64) -> f64 {
    sigma * (2.0 * std::f64::consts::LN_2).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of targets per scene.
    pub targets: (usize, usize),
    pub sigma: (f64, f64),
    pub amplitude: (f64, f64),
    pub background: f64,
    pub clutter_octaves: usize,
    pub clutter_amplitude: f64,
    /// Lattice spacing of the coarsest clutter octave, in pixels.
    pub clutter_scale: f64,
    pub noise_sigma: f64,
    /// Minimum distance between target centres.
    pub min_separation: f64,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            height: 96,
            width: 96,
            targets: (1, 3),
            sigma: (1.0, 2.0),
            amplitude: (0.35, 0.7),
            background: 0.3,
            clutter_octaves: 3,
            clutter_amplitude: 0.25,
            clutter_scale: 32.0,
            noise_sigma: 0.03,
            min_separation: 12.0,
            seed: 0,
        }
    }
}

impl SceneParams {
    pub fn with_seed(&self, seed: u64) -> Self {
        SceneParams { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("scene params", msg));
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if self.height == 0 || self.width == 0 {
            return bad(format!("empty scene {}x{}", self.height, self.width));
        }
        if self.targets.0 > self.targets.1 {
            return bad(format!("target range {:?} is empty", self.targets));
        }
        if !range_ok(self.sigma) || self.sigma.0 <= 0.0 || self.sigma.1 > MAX_SIGMA {
            return bad(format!("sigma range {:?} must lie in (0, {MAX_SIGMA}]", self.sigma));
        }
        if !range_ok(self.amplitude) || self.amplitude.0 <= 0.0 {
            return bad(format!("amplitude range {:?} must be positive", self.amplitude));
        }
        for (name, v) in [
            ("background", self.background),
            ("clutter_amplitude", self.clutter_amplitude),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.clutter_scale >= 1.0) {
            return bad(format!("clutter_scale must be >= 1, got {}", self.clutter_scale));
        }
        // Half-peak disks must neither overlap nor touch diagonally, or the
        // mask would merge two targets into one component.
        let need = 2.0 * half_peak_radius(self.sigma.1) + 2.0;
        if !(self.min_separation >= need) {
            return bad(format!(
                "min_separation {} too small for sigma {}; need at least {need:.3}",
                self.min_separation, self.sigma.1
            ));
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults, skipping blanks and `#`
    /// comments. Ranges are written `lo,hi`.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut p = SceneParams::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::invalid("scene params", format!("line {}: {msg}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let real = |v: &str| v.trim().parse::<f64>().map_err(|e| err(format!("{key}: {e}")));
            let int = |v: &str| v.trim().parse::<usize>().map_err(|e| err(format!("{key}: {e}")));
            let pair = |v: &str| -> Result<(String, String)> {
                v.split_once(',')
                    .map(|(a, b)| (a.to_string(), b.to_string()))
                    .ok_or_else(|| err(format!("{key} needs lo,hi")))
            };
            match key {
                "height" => p.height = int(value)?,
                "width" => p.width = int(value)?,
                "targets" => {
                    let (a, b) = pair(value)?;
                    p.targets = (int(&a)?, int(&b)?);
                }
                "sigma" => {
                    let (a, b) = pair(value)?;
                    p.sigma = (real(&a)?, real(&b)?);
                }
                "amplitude" => {
                    let (a, b) = pair(value)?;
                    p.amplitude = (real(&a)?, real(&b)?);
                }
                "background" => p.background = real(value)?,
                "clutter_octaves" => p.clutter_octaves = int(value)?,
                "clutter_amplitude" => p.clutter_amplitude = real(value)?,
                "clutter_scale" => p.clutter_scale = real(value)?,
                "noise_sigma" => p.noise_sigma = real(value)?,
                "min_separation" => p.min_separation = real(value)?,
                "seed" => p.seed = value.parse().map_err(|e| err(format!("{key}: {e}")))?,
                _ => return Err(err(format!("unknown key {key:?}"))),
            }
        }
        p.validate()?;
        Ok(p)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "height={}\nwidth={}\ntargets={},{}\nsigma={:?},{:?}\namplitude={:?},{:?}\nbackground={:?}\n\
             clutter_octaves={}\nclutter_amplitude={:?}\nclutter_scale={:?}\nnoise_sigma={:?}\n\
             min_separation={:?}\nseed={}\n",
            self.height,
            self.width,
            self.targets.0,
            self.targets.1,
            self.sigma.0,
            self.sigma.1,
            self.amplitude.0,
            self.amplitude.1,
            self.background,
            self.clutter_octaves,
            self.clutter_amplitude,
            self.clutter_scale,
            self.noise_sigma,
            self.min_separation,
            self.seed
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    /// Centre column, in pixel coordinates.
    pub cx: f64,
    /// Centre row, in pixel coordinates.
    pub cy: f64,
    pub amplitude: f64,
    pub sigma: f64,
    /// Realized contrast on the final image; `None` if undefined.
    pub snr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// 1x1xHxW, values in [0, 1].
    pub image: Tensor,
    pub mask: BinaryMask,
    pub instances: Vec<Instance>,
}

fn sample(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi { lo } else { rng.random_range(lo..hi) }
}

/// Sum of octaves of bilinearly interpolated lattice noise with smoothstep
/// weights. Each octave halves the lattice spacing and the amplitude; the
/// total is scaled so its magnitude never exceeds `amplitude`.
fn value_noise(rng: &mut impl Rng, h: usize, w: usize, octaves: usize, amplitude: f64, scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    if octaves == 0 || amplitude == 0.0 {
        return out;
    }
    let norm: f64 = (0..octaves).map(|o| 0.5f64.powi(o as i32)).sum();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    for o in 0..octaves {
        let spacing = (scale / (1u64 << o) as f64).max(1.0);
        let gh = (h as f64 / spacing).ceil() as usize + 2;
        let gw = (w as f64 / spacing).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weight = amplitude * 0.5f64.powi(o as i32) / norm;
        for r in 0..h {
            let fy = r as f64 / spacing;
            let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
            for c in 0..w {
                let fx = c as f64 / spacing;
                let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
                let at = |y: usize, x: usize| lattice[y * gw + x];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                out[r * w + c] += weight * (top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    out
}

/// Pixels strictly inside the half-peak radius of one target.
fn half_peak_mask(h: usize, w: usize, cx: f64, cy: f64, sigma: f64) -> BinaryMask {
    let r2 = half_peak_radius(sigma).powi(2);
    BinaryMask::from_fn(h, w, |r, c| {
        let (dy, dx) = (r as f64 - cy, c as f64 - cx);
        dx * dx + dy * dy < r2
    })
}

/// Renders a scene. The result depends only on `p`.
pub fn generate_scene(p: &SceneParams) -> Result<SyntheticScene> {
    p.validate()?;
    let (h, w) = (p.height, p.width);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let count = rng.random_range(p.targets.0..=p.targets.1);

    let mut placed: Vec<Instance> = Vec::with_capacity(count);
    let mut mask = BinaryMask::empty(h, w);
    for k in 0..count {
        let mut attempt = 0;
        loop {
            if attempt == MAX_RETRIES {
                return Err(Error::invalid(
                    "scene generation",
                    format!("could not place target {} of {count} after {MAX_RETRIES} attempts", k + 1),
                ));
            }
            attempt += 1;
            let sigma = sample(&mut rng, p.sigma);
            let amplitude = sample(&mut rng, p.amplitude);
            let margin = half_peak_radius(sigma).ceil() + 1.0;
            if 2.0 * margin >= h as f64 || 2.0 * margin >= w as f64 {
                continue;
            }
            let cx = rng.random_range(margin..w as f64 - margin);
            let cy = rng.random_range(margin..h as f64 - margin);
            let crowded = placed
                .iter()
                .any(|t| ((t.cx - cx).powi(2) + (t.cy - cy).powi(2)).sqrt() < p.min_separation);
            if crowded {
                continue;
            }
            let own = half_peak_mask(h, w, cx, cy, sigma);
            if own.count() == 0 || connected_components(&own).len() != 1 {
                continue;
            }
            for (i, &on) in own.bits().iter().enumerate() {
                if on {
                    mask.set(i / w, i % w, true);
                }
            }
            placed.push(Instance {
                cx,
                cy,
                amplitude,
                sigma,
                snr: None,
            });
            break;
        }
    }

    let clutter = value_noise(&mut rng, h, w, p.clutter_octaves, p.clutter_amplitude, p.clutter_scale);
    let noise = Normal::new(0.0, p.noise_sigma).map_err(|e| Error::invalid("scene params", e.to_string()))?;
    let mut pixels = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut v = p.background + clutter[r * w + c] + noise.sample(&mut rng);
            for t in &placed {
                let d2 = (c as f64 - t.cx).powi(2) + (r as f64 - t.cy).powi(2);
                v += t.amplitude * (-d2 / (2.0 * t.sigma * t.sigma)).exp();
            }
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    let image = Tensor::from_vec(Shape::new(1, 1, h, w), pixels)?;

    // Components come out in row-major order of their first pixel; attach
    // each realized SNR to the instance whose centre it contains.
    for comp in connected_components(&mask).components {
        let snr = snr_of_target(&image, &mask, &comp)?;
        let (cr, cc) = comp.centroid;
        let nearest = placed
            .iter_mut()
            .min_by(|a, b| {
                let da = (a.cy - cr).powi(2) + (a.cx - cc).powi(2);
                let db = (b.cy - cr).powi(2) + (b.cx - cc).powi(2);
                da.total_cmp(&db)
            })
            .expect("every component comes from a placed target");
        nearest.snr = snr;
    }
    Ok(SyntheticScene {
        image,
        mask,
        instances: placed,
    })
}

/// Gray image replicated into the three input channels the network expects.
pub fn to_rgb(image: &Tensor) -> Tensor {
    let [n, _, h, w] = image.shape().dims();
    Tensor::from_fn(Shape::new(n, 3, h, w), |b, _, r, c| image.at(b, 0, r, c))
}

const INSTANCE_HEADER: [&str; 5] = ["cx", "cy", "amp", "sigma", "snr"];

/// File names used for one scene inside a directory.
pub fn scene_files(dir: &Path, stem: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{stem}.pgm")),
        dir.join(format!("{stem}_mask.pgm")),
        dir.join(format!("{stem}.csv")),
    )
}

/// Writes `<stem>.pgm`, `<stem>_mask.pgm` and `<stem>.csv`. An undefined SNR
/// is written as an empty field.
pub fn write_scene(dir: &Path, stem: &str, scene: &SyntheticScene) -> Result<()> {
    let (img, msk, csv_path) = scene_files(dir, stem);
    Pgm::from_unit_map(&scene.image)?.write(&img)?;
    Pgm::from_mask(&scene.mask).write(&msk)?;
    let mut out = csv::Writer::from_path(&csv_path)?;
    out.write_record(INSTANCE_HEADER)?;
    for t in &scene.instances {
        out.write_record([
            format!("{:?}", t.cx),
            format!("{:?}", t.cy),
            format!("{:?}", t.amplitude),
            format!("{:?}", t.sigma),
            t.snr.map(|s| format!("{s:?}")).unwrap_or_default(),
        ])?;
    }
    out.flush().map_err(|e| Error::io(&csv_path, e))
}

pub fn read_scene(dir: &Path, stem: &str) -> Result<SyntheticScene> {
    let (img, msk, csv_path) = scene_files(dir, stem);
    let image = Pgm::read(&img)?;
    let mask = Pgm::read(&msk)?;
    if (image.width, image.height) != (mask.width, mask.height) {
        return Err(Error::shape(
            "read_scene",
            &[image.height, image.width],
            &[mask.height, mask.width],
        ));
    }
    let mut reader = csv::Reader::from_path(&csv_path)?;
    let bad = |msg: String| Error::invalid("read_scene", format!("{}: {msg}", csv_path.display()));
    if reader.headers()?.iter().ne(INSTANCE_HEADER) {
        return Err(bad(format!("expected header {}", INSTANCE_HEADER.join(","))));
    }
    let mut instances = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| bad("short record".into()))?
                .parse()
                .map_err(|e| bad(format!("{}: {e}", INSTANCE_HEADER[i])))
        };
        let snr = match rec.get(4) {
            Some("") | None => None,
            Some(_) => Some(num(4)?),
        };
        instances.push(Instance {
            cx: num(0)?,
            cy: num(1)?,
            amplitude: num(2)?,
            sigma: num(3)?,
            snr,
        });
    }
    Ok(SyntheticScene {
        image: image.to_unit_map(),
        mask: mask.to_mask(),
        instances,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub seed: u64,
}

pub const MANIFEST: &str = "manifest.csv";

/// Scene `i` of a corpus uses seed `seed + i` (wrapping).
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add(i as u64)
}

/// Generates `count` scenes into `dir` plus `manifest.csv` listing
/// `image,mask,seed` with paths relative to `dir`.
pub fn generate_corpus(dir: &Path, count: usize, params: &SceneParams, seed: u64) -> Result<Vec<ManifestEntry>> {
    params.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries = (0..count)
        .into_par_iter()
        .map(|i| {
            let s = scene_seed(seed, i);
            let stem = format!("scene_{i:05}");
            let scene = generate_scene(&params.with_seed(s))?;
            write_scene(dir, &stem, &scene)?;
            let (img, msk, _) = scene_files(Path::new(""), &stem);
            Ok(ManifestEntry {
                image: img,
                mask: msk,
                seed: s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = dir.join(MANIFEST);
    let mut out = csv::Writer::from_path(&path)?;
    out.write_record(["image", "mask", "seed"])?;
    for e in &entries {
        out.write_record([
            e.image.to_string_lossy().as_ref(),
            e.mask.to_string_lossy().as_ref(),
            &e.seed.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

/// Reads a manifest; relative paths are resolved against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut reader = csv::Reader::from_path(path)?;
    let mut entries = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let field = |i: usize| {
            rec.get(i).ok_or_else(|| {
                Error::invalid("manifest", format!("{}: record has {} fields, need 3", path.display(), rec.len()))
            })
        };
        let seed = field(2)?
            .parse()
            .map_err(|e| Error::invalid("manifest", format!("{}: seed: {e}", path.display())))?;
        entries.push(ManifestEntry {
            image: base.join(field(0)?),
            mask: base.join(field(1)?),
            seed,
        });
    }
    Ok(entries)
}

/// Loads every (image, mask) pair listed in a manifest, as 1x1xHxW maps.
pub fn load_corpus(manifest: &Path) -> Result<Vec<(Tensor, BinaryMask)>> {
    read_manifest(manifest)?
        .par_iter()
        .map(|e| {
            let img = Pgm::read(&e.image)?;
            let msk = Pgm::read(&e.mask)?;
            if (img.width, img.height) != (msk.width, msk.height) {
                return Err(Error::shape("load_corpus", &[img.height, img.width], &[msk.height, msk.width]));
            }
            Ok((img.to_unit_map(), msk.to_mask()))
        })
        .collect()
}
