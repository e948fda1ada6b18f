//! Synthetic spatially correlated regression (SCR) benchmark.
//!
//! Latent fields are white noise on a `G x G` grid smoothed by a Gaussian
//! kernel and standardized; off-grid values come from bilinear interpolation.
//! The target is `sin(f1) + f2 * f3 + 0.5 * f1^2`. Observed features are lossy
//! combinations of the latent fields so the target cannot be recovered from
//! features alone.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{MultiSourceDataset, Sample, SourceDataset};
use crate::error::{DmspError, Result};
use crate::geometry::GeoPoint;

/// One released feature, computed from latent fields (0-based indices).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FeatureMap {
    Sum(usize, usize),
    Abs(usize),
    Product(usize, usize),
    Square(usize),
}

impl FeatureMap {
    fn apply(&self, f: &[f64]) -> f64 {
        match *self {
            FeatureMap::Sum(a, b) => f[a] + f[b],
            FeatureMap::Abs(a) => f[a].abs(),
            FeatureMap::Product(a, b) => f[a] * f[b],
            FeatureMap::Square(a) => f[a] * f[a],
        }
    }

    fn max_field(&self) -> usize {
        match *self {
            FeatureMap::Sum(a, b) | FeatureMap::Product(a, b) => a.max(b),
            FeatureMap::Abs(a) | FeatureMap::Square(a) => a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrConfig {
    pub grid_size: usize,
    /// Gaussian smoothing length-scale in grid cells.
    pub length_scale: f64,
    pub field_count: usize,
    pub n_high: usize,
    pub n_low: usize,
    pub noise_sigma: f64,
    pub features: Vec<FeatureMap>,
}

impl Default for ScrConfig {
    fn default() -> Self {
        Self {
            grid_size: 64,
            length_scale: 8.0,
            field_count: 3,
            n_high: 200,
            n_low: 2000,
            noise_sigma: 0.5,
            features: vec![FeatureMap::Sum(0, 1), FeatureMap::Abs(2)],
        }
    }
}

impl ScrConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DmspError::Config(m.to_string()));
        if self.grid_size < 2 {
            return bad("grid size must be at least 2");
        }
        if !(self.length_scale.is_finite() && self.length_scale > 0.0) {
            return bad("length scale must be positive");
        }
        if self.field_count < 3 {
            return bad("at least 3 latent fields are required by the target");
        }
        if self.n_high == 0 || self.n_low == 0 {
            return bad("sample counts must be positive");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise sigma must be nonnegative");
        }
        if self.features.iter().any(|f| f.max_field() >= self.field_count) {
            return bad("feature map references a missing latent field");
        }
        Ok(())
    }
}

/// Ground truth on the integer grid nodes `0..size` in each axis.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthGrid {
    size: usize,
    /// Row-major, `values[y * size + x]`.
    values: Vec<f64>,
}

impl TruthGrid {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.size + x]
    }

    /// Value at the grid node nearest to `p` (clamped to the grid).
    pub fn nearest(&self, p: GeoPoint) -> f64 {
        let max = (self.size - 1) as f64;
        let x = p.x.round().clamp(0.0, max) as usize;
        let y = p.y.round().clamp(0.0, max) as usize;
        self.value(x, y)
    }

    pub fn rows(&self) -> impl Iterator<Item = (GeoPoint, f64)> + '_ {
        (0..self.size).flat_map(move |y| {
            (0..self.size).map(move |x| (GeoPoint::new(x as f64, y as f64), self.value(x, y)))
        })
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let run = || -> std::io::Result<()> {
            let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
            writeln!(w, "x,y,truth")?;
            for (p, v) in self.rows() {
                writeln!(w, "{},{},{}", p.x, p.y, v)?;
            }
            w.flush()
        };
        run().map_err(|e| DmspError::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| DmspError::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let headers = rdr
            .headers()
            .map_err(|e| DmspError::SchemaViolation(e.to_string()))?
            .clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DmspError::SchemaViolation(format!("missing column `{name}`")))
        };
        let (cx, cy, ct) = (col("x")?, col("y")?, col("truth")?);
        let mut cells = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| DmspError::Parse {
                row,
                message: e.to_string(),
            })?;
            let num = |c: usize| -> Result<f64> {
                rec.get(c)
                    .unwrap_or("")
                    .parse()
                    .map_err(|_| DmspError::Parse {
                        row,
                        message: format!("non-numeric cell in column `{}`", &headers[c]),
                    })
            };
            cells.push((num(cx)?, num(cy)?, num(ct)?));
        }
        let size = (cells.len() as f64).sqrt().round() as usize;
        if size < 2 || size * size != cells.len() {
            return Err(DmspError::SchemaViolation(format!(
                "truth grid has {} rows, not a square grid",
                cells.len()
            )));
        }
        let mut values = vec![f64::NAN; size * size];
        for (row, (x, y, v)) in cells.into_iter().enumerate() {
            let (xi, yi) = (x.round(), y.round());
            if xi != x || yi != y || xi < 0.0 || yi < 0.0 || xi >= size as f64 || yi >= size as f64 {
                return Err(DmspError::Parse {
                    row: row + 1,
                    message: format!("({x}, {y}) is not a node of a {size}x{size} grid"),
                });
            }
            values[yi as usize * size + xi as usize] = v;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(DmspError::SchemaViolation("truth grid has missing nodes".into()));
        }
        Ok(Self { size, values })
    }
}

/// The latent fields behind one SCR instance.
#[derive(Debug, Clone)]
pub struct ScrScene {
    config: ScrConfig,
    /// `fields[f][y * G + x]`, each standardized to mean 0 and unit variance.
    fields: Vec<Vec<f64>>,
}

impl ScrScene {
    pub fn new(config: ScrConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, 0);
        let g = config.grid_size;
        let fields = (0..config.field_count)
            .map(|_| smoothed_field(g, config.length_scale, &mut rng))
            .collect();
        Ok(Self { config, fields })
    }

    pub fn config(&self) -> &ScrConfig {
        &self.config
    }

    /// Upper bound of the square domain `[0, extent]^2`.
    pub fn extent(&self) -> f64 {
        (self.config.grid_size - 1) as f64
    }

    pub fn latent_at(&self, p: GeoPoint) -> Vec<f64> {
        self.fields.iter().map(|f| bilinear(f, self.config.grid_size, p)).collect()
    }

    pub fn truth_at(&self, p: GeoPoint) -> f64 {
        target_of(&self.latent_at(p))
    }

    pub fn features_at(&self, p: GeoPoint) -> Vec<f64> {
        let latent = self.latent_at(p);
        self.config.features.iter().map(|m| m.apply(&latent)).collect()
    }

    pub fn truth_grid(&self) -> TruthGrid {
        let g = self.config.grid_size;
        let values = (0..g * g)
            .map(|c| {
                let latent: Vec<f64> = self.fields.iter().map(|f| f[c]).collect();
                target_of(&latent)
            })
            .collect();
        TruthGrid { size: g, values }
    }

    /// Draws the two sources: source 0 exact, source 1 with Gaussian noise.
    pub fn sample_dataset(&self, seed: u64) -> Result<MultiSourceDataset> {
        let mut loc_rng = stream(seed, 1);
        let mut noise_rng = stream(seed, 2);
        let extent = self.extent();
        let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<GeoPoint> {
            (0..n)
                .map(|_| GeoPoint::new(rng.random_range(0.0..=extent), rng.random_range(0.0..=extent)))
                .collect()
        };
        let high_locs = draw(self.config.n_high, &mut loc_rng);
        let low_locs = draw(self.config.n_low, &mut loc_rng);
        let noise = Normal::new(0.0, self.config.noise_sigma)
            .map_err(|e| DmspError::Config(e.to_string()))?;

        let make = |p: GeoPoint, target: f64| Sample {
            location: p,
            features: self.features_at(p),
            target,
            timestamp: 0,
        };
        let high: Vec<Sample> = high_locs.into_iter().map(|p| make(p, self.truth_at(p))).collect();
        let low: Vec<Sample> = low_locs
            .into_iter()
            .map(|p| {
                let eps = if self.config.noise_sigma > 0.0 {
                    noise.sample(&mut noise_rng)
                } else {
                    0.0
                };
                make(p, self.truth_at(p) + eps)
            })
            .collect();
        let p = self.config.features.len();
        MultiSourceDataset::new(vec![
            SourceDataset::new(0, "high_quality", p, high)?,
            SourceDataset::new(1, "low_quality", p, low)?,
        ])
    }
}

/// Generates an SCR instance: the two-source dataset and its truth grid.
pub fn generate_scr(config: &ScrConfig, seed: u64) -> Result<(MultiSourceDataset, TruthGrid)> {
    let scene = ScrScene::new(config.clone(), seed)?;
    Ok((scene.sample_dataset(seed)?, scene.truth_grid()))
}

fn target_of(f: &[f64]) -> f64 {
    f[0].sin() + f[1] * f[2] + 0.5 * f[0] * f[0]
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn smoothed_field(g: usize, length_scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let radius = (3.0 * length_scale).ceil() as usize;
    let m = g + 2 * radius;
    let noise: Vec<f64> = (0..m * m).map(|_| StandardNormal.sample(rng)).collect();
    let kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * length_scale * length_scale)).exp()
        })
        .collect();
    // Rows of the padded grid, restricted to the output columns.
    let mut horiz = vec![0.0; m * g];
    for y in 0..m {
        for x in 0..g {
            horiz[y * g + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, w)| w * noise[y * m + x + i])
                .sum();
        }
    }
    let mut field = vec![0.0; g * g];
    for y in 0..g {
        for x in 0..g {
            field[y * g + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, w)| w * horiz[(y + i) * g + x])
                .sum();
        }
    }
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let var = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(f64::MIN_POSITIVE);
    field.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    field
}

fn bilinear(field: &[f64], g: usize, p: GeoPoint) -> f64 {
    let max = (g - 1) as f64;
    let x = p.x.clamp(0.0, max);
    let y = p.y.clamp(0.0, max);
    let x0 = (x.floor() as usize).min(g - 2);
    let y0 = (y.floor() as usize).min(g - 2);
    let tx = x - x0 as f64;
    let ty = y - y0 as f64;
    let at = |xi: usize, yi: usize| field[yi * g + xi];
    let bottom = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
    let top = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
    bottom * (1.0 - ty) + top * ty
}
