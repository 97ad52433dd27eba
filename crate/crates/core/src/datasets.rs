//! Synthetic paired-modality worlds with known factor structure.
//!
//! A [`World`] is a set of independent discrete factors plus a rule that
//! turns a factor assignment into the rich modality (`x_alpha`). A
//! [`Scenario`] decides which factors the second modality (`x_beta`) gets to
//! see as one-hot blocks; everything withheld is a nuisance of `x_alpha`.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::seed::child_rng;

pub const CANVAS: usize = 16;
const CELL: usize = 4;
const INTENSITIES: [f64; 3] = [0.4, 0.7, 1.0];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    pub cardinality: usize,
}

impl FactorSpec {
    pub fn new(name: impl Into<String>, cardinality: usize) -> Self {
        Self {
            name: name.into(),
            cardinality,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorldKind {
    Codebook,
    Minisprites,
}

/// Construction parameters for a [`World`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub kind: WorldKind,
    /// Defaults to four factors of cardinality 4 (codebook) or the five
    /// sprite factors (minisprites).
    #[serde(default)]
    pub factors: Option<Vec<FactorSpec>>,
    #[serde(default = "default_codeword_dim")]
    pub codeword_dim: usize,
    /// Standard deviation of Gaussian noise added to `x_alpha`.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_codeword_dim() -> usize {
    8
}

impl WorldConfig {
    pub fn codebook(factors: Vec<FactorSpec>, codeword_dim: usize, seed: u64) -> Self {
        Self {
            kind: WorldKind::Codebook,
            factors: Some(factors),
            codeword_dim,
            noise: 0.0,
            seed,
        }
    }

    pub fn default_codebook(seed: u64) -> Self {
        Self::codebook(
            (0..4).map(|i| FactorSpec::new(format!("f{i}"), 4)).collect(),
            default_codeword_dim(),
            seed,
        )
    }

    pub fn minisprites(seed: u64) -> Self {
        Self {
            kind: WorldKind::Minisprites,
            factors: None,
            codeword_dim: default_codeword_dim(),
            noise: 0.0,
            seed,
        }
    }
}

pub fn minisprite_factors() -> Vec<FactorSpec> {
    vec![
        FactorSpec::new("shape", 3),
        FactorSpec::new("posX", 4),
        FactorSpec::new("posY", 4),
        FactorSpec::new("size", 2),
        FactorSpec::new("intensity", 3),
    ]
}

/// Immutable factored data universe.
#[derive(Clone, Debug)]
pub struct World {
    kind: WorldKind,
    factors: Vec<FactorSpec>,
    /// factor -> value -> unit-norm codeword (codebook worlds only)
    codebooks: Vec<Vec<Vec<f64>>>,
    codeword_dim: usize,
    noise: f64,
    seed: u64,
}

impl World {
    pub fn build(config: &WorldConfig) -> Result<Self> {
        if !(config.noise >= 0.0 && config.noise.is_finite()) {
            return Err(Error::config(format!("noise must be >= 0, got {}", config.noise)));
        }
        let factors = match config.kind {
            WorldKind::Codebook => config
                .factors
                .clone()
                .unwrap_or_else(|| WorldConfig::default_codebook(0).factors.unwrap()),
            WorldKind::Minisprites => {
                let fixed = minisprite_factors();
                if let Some(f) = &config.factors {
                    if *f != fixed {
                        return Err(Error::config(
                            "minisprites factors are fixed to shape:3, posX:4, posY:4, size:2, intensity:3",
                        ));
                    }
                }
                fixed
            }
        };
        if factors.is_empty() {
            return Err(Error::config("a world needs at least one factor"));
        }
        let mut seen = HashSet::new();
        for f in &factors {
            if f.cardinality < 2 {
                return Err(Error::config(format!(
                    "factor {} has cardinality {} (< 2)",
                    f.name, f.cardinality
                )));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(Error::config(format!("duplicate factor name {}", f.name)));
            }
        }

        let codebooks = match config.kind {
            WorldKind::Codebook => {
                if config.codeword_dim == 0 {
                    return Err(Error::config("codeword_dim must be >= 1"));
                }
                factors
                    .iter()
                    .map(|f| codebook_for(config.seed, f, config.codeword_dim))
                    .collect()
            }
            WorldKind::Minisprites => Vec::new(),
        };

        Ok(Self {
            kind: config.kind,
            factors,
            codebooks,
            codeword_dim: config.codeword_dim,
            noise: config.noise,
            seed: config.seed,
        })
    }

    pub fn kind(&self) -> WorldKind {
        self.kind
    }

    pub fn factors(&self) -> &[FactorSpec] {
        &self.factors
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn factor_index(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.name == name)
    }

    pub fn codeword(&self, factor: usize, value: usize) -> Option<&[f64]> {
        self.codebooks.get(factor)?.get(value).map(Vec::as_slice)
    }

    pub fn alpha_dim(&self) -> usize {
        match self.kind {
            WorldKind::Codebook => self.factors.len() * self.codeword_dim,
            WorldKind::Minisprites => CANVAS * CANVAS,
        }
    }

    /// Short label used in CSV output.
    pub fn name(&self) -> String {
        match self.kind {
            WorldKind::Codebook => format!("codebook{}", self.factors.len()),
            WorldKind::Minisprites => "minisprites".to_string(),
        }
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if labels.len() != self.factors.len() {
            return Err(Error::config(format!(
                "expected {} labels, got {}",
                self.factors.len(),
                labels.len()
            )));
        }
        for (f, &v) in self.factors.iter().zip(labels) {
            if v >= f.cardinality {
                return Err(Error::config(format!(
                    "label {v} out of range for factor {} (cardinality {})",
                    f.name, f.cardinality
                )));
            }
        }
        Ok(())
    }

    /// Noise-free `x_alpha` for one factor assignment.
    pub fn render_alpha(&self, labels: &[usize], out: &mut [f64]) -> Result<()> {
        self.check_labels(labels)?;
        if out.len() != self.alpha_dim() {
            return Err(Error::config("output buffer has the wrong length"));
        }
        match self.kind {
            WorldKind::Codebook => {
                let d = self.codeword_dim;
                for (f, &v) in labels.iter().enumerate() {
                    out[f * d..(f + 1) * d].copy_from_slice(&self.codebooks[f][v]);
                }
            }
            WorldKind::Minisprites => draw_sprite(labels, out),
        }
        Ok(())
    }
}

fn codebook_for(seed: u64, factor: &FactorSpec, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = child_rng(seed, &format!("codebook/{}", factor.name));
    (0..factor.cardinality)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// 16×16 grayscale sprite for `(shape, posX, posY, size, intensity)`.
pub fn render_minisprite(labels: &[usize]) -> Result<Tensor<f64>> {
    let world = World::build(&WorldConfig::minisprites(0))?;
    let mut out = vec![0.0; CANVAS * CANVAS];
    world.render_alpha(labels, &mut out)?;
    Tensor::vector(out)
}

fn draw_sprite(labels: &[usize], out: &mut [f64]) {
    let (shape, pos_x, pos_y, size, intensity) =
        (labels[0], labels[1], labels[2], labels[3], labels[4]);
    let cx = (CELL * pos_x + CELL / 2) as f64;
    let cy = (CELL * pos_y + CELL / 2) as f64;
    let r = 2.0 * (size + 1) as f64;
    let value = INTENSITIES[intensity];
    for py in 0..CANVAS {
        for px in 0..CANVAS {
            let dx = px as f64 + 0.5 - cx;
            let dy = py as f64 + 0.5 - cy;
            let inside = match shape {
                // square
                0 => dx.abs() < r && dy.abs() < r,
                // cross with two-pixel-wide arms
                1 => (dx.abs() < r && dy.abs() < 1.0) || (dy.abs() < r && dx.abs() < 1.0),
                // ellipse, wider than tall
                _ => (dx / r).powi(2) + (dy / (0.6 * r)).powi(2) <= 1.0,
            };
            out[py * CANVAS + px] = if inside { value } else { 0.0 };
        }
    }
}

/// Which factors the factor modality sees.
#[derive(Clone, Debug)]
pub struct Scenario {
    world: Arc<World>,
    provided: Vec<usize>,
    withheld: Vec<usize>,
}

impl Scenario {
    /// Scenario withholding the named factors and providing the rest.
    pub fn withholding(world: Arc<World>, withheld: &[&str]) -> Result<Self> {
        let mut w = Vec::with_capacity(withheld.len());
        for name in withheld {
            let idx = world
                .factor_index(name)
                .ok_or_else(|| Error::config(format!("unknown factor {name}")))?;
            if w.contains(&idx) {
                return Err(Error::config(format!("factor {name} withheld twice")));
            }
            w.push(idx);
        }
        Self::from_withheld_indices(world, w)
    }

    pub fn from_withheld_indices(world: Arc<World>, mut withheld: Vec<usize>) -> Result<Self> {
        withheld.sort_unstable();
        withheld.dedup();
        if withheld.iter().any(|&i| i >= world.factors.len()) {
            return Err(Error::config("withheld factor index out of range"));
        }
        let provided: Vec<usize> = (0..world.factors.len())
            .filter(|i| !withheld.contains(i))
            .collect();
        if provided.is_empty() {
            return Err(Error::config("a scenario must provide at least one factor"));
        }
        Ok(Self {
            world,
            provided,
            withheld,
        })
    }

    pub fn world(&self) -> &Arc<World> {
        &self.world
    }

    pub fn provided(&self) -> &[usize] {
        &self.provided
    }

    pub fn withheld(&self) -> &[usize] {
        &self.withheld
    }

    pub fn withheld_names(&self) -> Vec<&str> {
        self.withheld
            .iter()
            .map(|&i| self.world.factors[i].name.as_str())
            .collect()
    }

    pub fn provided_names(&self) -> Vec<&str> {
        self.provided
            .iter()
            .map(|&i| self.world.factors[i].name.as_str())
            .collect()
    }

    /// `+`-joined withheld factor names, or `none`.
    pub fn label(&self) -> String {
        if self.withheld.is_empty() {
            "none".to_string()
        } else {
            self.withheld_names().join("+")
        }
    }

    /// Width of the one-hot factor modality.
    pub fn beta_dim(&self) -> usize {
        self.provided
            .iter()
            .map(|&i| self.world.factors[i].cardinality)
            .sum()
    }

    pub fn alpha_dim(&self) -> usize {
        self.world.alpha_dim()
    }
}

/// Entropy in nats of the withheld factors, which are independent and
/// uniform by construction.
pub fn nuisance_entropy(scenario: &Scenario) -> Result<f64> {
    if scenario.withheld.is_empty() {
        return Err(Error::config("scenario withholds no factor"));
    }
    Ok(scenario
        .withheld
        .iter()
        .map(|&i| (scenario.world.factors[i].cardinality as f64).ln())
        .sum())
}

/// A batch of positive pairs with their ground-truth factor labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub x_alpha: Tensor<f64>,
    pub x_beta: Tensor<f64>,
    /// `n` rows of one value per world factor.
    pub labels: Vec<Vec<usize>>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_column(&self, factor: usize) -> Vec<usize> {
        self.labels.iter().map(|row| row[factor]).collect()
    }

    /// Writes one row per sample: labels, then `x_beta`, then `x_alpha`.
    pub fn write_csv<W: Write>(&self, world: &World, mut w: W) -> Result<()> {
        let mut header: Vec<String> = world.factors.iter().map(|f| f.name.clone()).collect();
        header.extend((0..self.x_beta.cols()).map(|j| format!("xb{j}")));
        header.extend((0..self.x_alpha.cols()).map(|j| format!("xa{j}")));
        writeln!(w, "{}", header.join(","))?;
        for (i, labels) in self.labels.iter().enumerate() {
            let mut cells: Vec<String> = labels.iter().map(usize::to_string).collect();
            cells.extend(self.x_beta.row(i).iter().map(f64::to_string));
            cells.extend(self.x_alpha.row(i).iter().map(f64::to_string));
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn export_csv(&self, world: &World, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(world, file)
    }
}

/// Draws `n` i.i.d. factor assignments and renders both modalities.
pub fn sample_batch(scenario: &Scenario, n: usize, seed: u64) -> Result<PairBatch> {
    if n == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    let world = &scenario.world;
    let mut label_rng = child_rng(seed, "labels");
    let labels: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            world
                .factors
                .iter()
                .map(|f| label_rng.random_range(0..f.cardinality))
                .collect()
        })
        .collect();

    let da = world.alpha_dim();
    let mut xa = vec![0.0; n * da];
    for (i, l) in labels.iter().enumerate() {
        world.render_alpha(l, &mut xa[i * da..(i + 1) * da])?;
    }
    if world.noise > 0.0 {
        let mut noise_rng = child_rng(seed, "noise");
        for x in &mut xa {
            let e: f64 = StandardNormal.sample(&mut noise_rng);
            *x += world.noise * e;
        }
    }

    let db = scenario.beta_dim();
    let mut xb = vec![0.0; n * db];
    for (i, l) in labels.iter().enumerate() {
        let mut offset = 0;
        for &f in &scenario.provided {
            xb[i * db + offset + l[f]] = 1.0;
            offset += world.factors[f].cardinality;
        }
    }

    Ok(PairBatch {
        x_alpha: Tensor::matrix(n, da, xa)?,
        x_beta: Tensor::matrix(n, db, xb)?,
        labels,
    })
}
