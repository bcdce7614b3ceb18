use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::report::{Accumulator, Arm, ModelId, Observation, Provenance, Reference, Report, Row};
use super::stats::RunningStats;
use super::{hex, ExperimentConfig};
use crate::compositor::{composite, sample_placement, synth_host, synth_watermark, Placement, WatermarkAsset};
use crate::compositor::{ASSET_SIZE, HOST_SIZE};
use crate::error::{io_err, Error, Result};
use crate::imaging::{quantize, uniform_noise};
use crate::removal::{load_checkpoint, RemovalModel};
use crate::rng::{derive_seed, seeded, stream};
use crate::tensor::Tensor;
use crate::transforms::{gaussian_blur, jpeg_roundtrip};
use crate::vaccine::{generate_vaccine, project, VaccineKind};

/// A model together with the identity recorded in reports.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub id: ModelId,
    pub model: RemovalModel,
}

impl LoadedModel {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(io_err(path))?;
        let model = load_checkpoint(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().replace(',', "_"))
            .unwrap_or_else(|| model.variant().to_string());
        Ok(Self {
            id: ModelId {
                name,
                variant: model.variant().to_string(),
                path: path.display().to_string(),
                sha256: hex(&Sha256::digest(&bytes)),
            },
            model,
        })
    }

    /// Wraps a model that has no checkpoint file; its id hashes the weights.
    pub fn in_memory(name: &str, model: RemovalModel) -> Self {
        let mut h = Sha256::new();
        for p in model.params() {
            for v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
        Self {
            id: ModelId {
                name: name.replace(',', "_"),
                variant: model.variant().to_string(),
                path: String::new(),
                sha256: hex(&h.finalize()),
            },
            model,
        }
    }
}

fn load_models(config: &ExperimentConfig) -> Result<Vec<LoadedModel>> {
    if config.models.is_empty() {
        return Err(Error::InvalidArgument("no model checkpoints configured".into()));
    }
    config.models.iter().map(LoadedModel::load).collect()
}

// Seed-path tags that keep sweep-specific draws apart from per-host draws.
const PATTERN_TAG: u64 = 1 << 40;
const LOCATION_TAG: u64 = 2 << 40;
const CELL_TAG: u64 = 3 << 40;

type VaccineKey = (usize, Vec<usize>, VaccineKind, u32);

/// Shared data generation and vaccine cache for one experiment run. A
/// vaccine depends only on the host, the attacked models and the budget, so
/// it is generated once and reused across watermarks and cells.
struct Workbench<'a> {
    config: &'a ExperimentConfig,
    models: &'a [LoadedModel],
    vaccines: HashMap<VaccineKey, Tensor>,
}

impl<'a> Workbench<'a> {
    fn new(config: &'a ExperimentConfig, models: &'a [LoadedModel]) -> Result<Self> {
        config.validate()?;
        if models.is_empty() {
            return Err(Error::InvalidArgument("no models supplied".into()));
        }
        Ok(Self {
            config,
            models,
            vaccines: HashMap::new(),
        })
    }

    fn seed(&self, path: &[u64]) -> u64 {
        derive_seed(self.config.seed, path)
    }

    fn host(&self, i: usize) -> Tensor {
        let h = synth_host(&mut seeded(self.seed(&[stream::HOST, i as u64])), HOST_SIZE, HOST_SIZE);
        if self.config.vaccine.quantize {
            quantize(&h)
        } else {
            h
        }
    }

    fn watermark(&self, path: &[u64]) -> WatermarkAsset {
        let mut full = vec![stream::WATERMARK];
        full.extend_from_slice(path);
        synth_watermark(&mut seeded(self.seed(&full)), ASSET_SIZE, ASSET_SIZE)
    }

    /// Placement drawn from the configured ranges.
    fn placement(&self, i: usize, j: usize) -> Result<Placement> {
        let pc = &self.config.placement;
        let mut rng = seeded(self.seed(&[stream::PLACEMENT, i as u64, j as u64]));
        if pc.random_location {
            sample_placement(&mut rng, (HOST_SIZE, HOST_SIZE), pc.size_range, pc.alpha_range)
        } else {
            use rand::Rng as _;
            let size = rng.gen_range(pc.size_range.0..=pc.size_range.1);
            let alpha = rng.gen_range(pc.alpha_range.0..=pc.alpha_range.1);
            Ok(Placement::centered(HOST_SIZE, HOST_SIZE, size, alpha))
        }
    }

    fn noise(&self, host: &Tensor, path: &[u64]) -> Result<Tensor> {
        let eps = self.config.vaccine.epsilon;
        let mut full = vec![stream::NOISE];
        full.extend_from_slice(path);
        let mut d = uniform_noise(host.shape(), eps, self.seed(&full))?;
        project(host, &mut d, eps)?;
        Ok(d)
    }

    fn vaccine(&mut self, i: usize, host: &Tensor, sources: &[usize], kind: VaccineKind, eps: f32) -> Result<Tensor> {
        let key = (i, sources.to_vec(), kind, eps.to_bits());
        if let Some(d) = self.vaccines.get(&key) {
            return Ok(d.clone());
        }
        let cfg = crate::vaccine::VaccineConfig {
            epsilon: eps,
            ..self.config.vaccine.config(kind)
        };
        let models: Vec<&RemovalModel> = sources.iter().map(|&s| &self.models[s].model).collect();
        let delta = generate_vaccine(host, &models, &cfg)?.delta;
        self.vaccines.insert(key, delta.clone());
        Ok(delta)
    }

    /// The perturbation of each configured arm for host `i` against `sources`.
    fn arm_deltas(&mut self, i: usize, host: &Tensor, sources: &[usize], noise_path: &[u64]) -> Result<Vec<(Arm, Option<Tensor>)>> {
        let eps = self.config.vaccine.epsilon;
        let arms = self.config.arms.clone();
        let mut out = Vec::with_capacity(arms.len());
        for arm in arms {
            let d = match arm {
                Arm::Clean => None,
                Arm::Rn => Some(self.noise(host, noise_path)?),
                Arm::Dwv => Some(self.vaccine(i, host, sources, VaccineKind::Dwv, eps)?),
                Arm::Iwv => Some(self.vaccine(i, host, sources, VaccineKind::Iwv, eps)?),
            };
            out.push((arm, d));
        }
        Ok(out)
    }

    /// The image published by the owner: host plus perturbation.
    fn protected(&self, host: &Tensor, delta: Option<&Tensor>) -> Result<Tensor> {
        let x = match delta {
            Some(d) => host.add(d)?,
            None => host.clone(),
        };
        Ok(if self.config.vaccine.quantize { quantize(&x) } else { x })
    }

    fn report(&self, name: String, experiment: &str, models: &[&LoadedModel], rows: Vec<Row>, mut notes: Vec<String>) -> Result<Report> {
        notes.push("dwv is scored against the clean host; iwv against the remover's input".into());
        if self.config.vaccine.quantize {
            notes.push("protected images rounded to the 8-bit grid before watermarking".into());
        }
        Ok(Report {
            name,
            provenance: Provenance {
                experiment: experiment.to_string(),
                config_hash: self.config.hash()?,
                seed: self.config.seed,
                models: models.iter().map(|m| m.id.clone()).collect(),
                notes,
            },
            config: serde_json::to_value(self.config)?,
            rows,
        })
    }
}

/// Scores `restored` for `arm` against every reference the arm allows.
fn score(acc: &mut Accumulator, scope: &str, arm: Arm, host: &Tensor, input: &Tensor, restored: &Tensor, gt_mask: &Tensor) -> Result<()> {
    for &r in arm.references() {
        let reference = match r {
            Reference::Host => host,
            Reference::Watermarked => input,
        };
        acc.record(scope, arm, r, &Observation::measure(restored, reference, gt_mask)?)?;
    }
    Ok(())
}

/// Clean, random-noise, DWV and IWV arms on shared (host, watermark,
/// placement) triples; one report per model.
pub fn run_effectiveness(config: &ExperimentConfig) -> Result<Vec<Report>> {
    effectiveness_with(config, &load_models(config)?)
}

pub fn effectiveness_with(config: &ExperimentConfig, models: &[LoadedModel]) -> Result<Vec<Report>> {
    let mut wb = Workbench::new(config, models)?;
    let mut reports = Vec::new();
    for (mi, m) in models.iter().enumerate() {
        let mut acc = Accumulator::new();
        for i in 0..config.n_hosts {
            let host = wb.host(i);
            for j in 0..config.n_watermarks {
                let wm = wb.watermark(&[i as u64, j as u64]);
                let theta = wb.placement(i, j)?;
                for (arm, delta) in wb.arm_deltas(i, &host, &[mi], &[i as u64, j as u64])? {
                    let x = wb.protected(&host, delta.as_ref())?;
                    let c = composite(&x, &wm, &theta)?;
                    let out = m.model.forward(&c.watermarked)?.restored;
                    score(&mut acc, "", arm, &host, &c.watermarked, &out, &c.gt_mask)?;
                }
            }
        }
        let notes = vec![format!(
            "{} hosts x {} watermarks; random-noise arm is uniform in [-epsilon, epsilon], resampled per image",
            config.n_hosts, config.n_watermarks
        )];
        reports.push(wb.report(format!("effectiveness_{}", m.id.name), "effectiveness", &[m], acc.rows(), notes)?);
    }
    Ok(reports)
}

fn float_label(v: f32) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn eps_label(eps: f32) -> String {
    float_label(eps * 255.0)
}

/// Pattern, location, size and transparency sweeps on the primary model.
/// Each cell is scoped `<sweep>=<value>`; the scope `<sweep>` alone holds the
/// mean and spread of the cell means.
pub fn run_universality(config: &ExperimentConfig) -> Result<Report> {
    universality_with(config, &load_models(config)?)
}

pub fn universality_with(config: &ExperimentConfig, models: &[LoadedModel]) -> Result<Report> {
    let mut wb = Workbench::new(config, models)?;
    let u = &config.universality;
    let base_wm = wb.watermark(&[PATTERN_TAG, 0]);
    let centered = |size, alpha| Placement::centered(HOST_SIZE, HOST_SIZE, size, alpha);
    let mut cells: Vec<(String, WatermarkAsset, Placement)> = Vec::new();
    for k in 0..u.n_patterns {
        cells.push((format!("pattern={k}"), wb.watermark(&[PATTERN_TAG, k as u64]), centered(u.size, u.alpha)));
    }
    for l in 0..u.n_locations {
        let mut rng = seeded(wb.seed(&[stream::PLACEMENT, LOCATION_TAG, l as u64]));
        let theta = sample_placement(&mut rng, (HOST_SIZE, HOST_SIZE), (u.size, u.size), (u.alpha, u.alpha))?;
        cells.push((format!("location={l}"), base_wm.clone(), theta));
    }
    for &s in &u.sizes {
        cells.push((format!("size={s}"), base_wm.clone(), centered(s, u.alpha)));
    }
    for &a in &u.alphas {
        cells.push((format!("alpha={}", float_label(a)), base_wm.clone(), centered(u.size, a)));
    }

    let model = &models[0];
    let mut acc = Accumulator::new();
    for i in 0..config.n_hosts {
        let host = wb.host(i);
        for (ci, (scope, wm, theta)) in cells.iter().enumerate() {
            for (arm, delta) in wb.arm_deltas(i, &host, &[0], &[i as u64, CELL_TAG + ci as u64])? {
                let x = wb.protected(&host, delta.as_ref())?;
                let c = composite(&x, wm, theta)?;
                let out = model.model.forward(&c.watermarked)?.restored;
                score(&mut acc, scope, arm, &host, &c.watermarked, &out, &c.gt_mask)?;
            }
        }
    }

    let mut rows = acc.rows();
    let mut summary: BTreeMap<(String, Arm, Reference, super::Metric), RunningStats> = BTreeMap::new();
    for r in &rows {
        let sweep = r.scope.split('=').next().unwrap_or_default().to_string();
        summary.entry((sweep, r.arm, r.reference, r.metric)).or_default().push(r.mean);
    }
    rows.extend(summary.into_iter().map(|((scope, arm, reference, metric), s)| Row {
        scope,
        arm,
        reference,
        metric,
        mean: s.mean(),
        std: s.std(),
        n: s.count(),
    }));
    let notes = vec![format!(
        "cell means over {} hosts; sweep rows give mean and std across cells; fixed settings size {} and transparency {}",
        config.n_hosts, u.size, u.alpha
    )];
    wb.report("universality".into(), "universality", &[model], rows, notes)
}

/// Source×target matrix of vaccines crafted on one model and applied to
/// another, plus stacked vaccines over the budget sweep. Scopes are
/// `tgt=T` (clean, rn), `src=S/tgt=T` (dwv, iwv) and
/// `eps=E/src=S/tgt=T` with `S` a model name or `stacked` (dwv).
pub fn run_transferability(config: &ExperimentConfig) -> Result<Report> {
    transferability_with(config, &load_models(config)?)
}

pub fn transferability_with(config: &ExperimentConfig, models: &[LoadedModel]) -> Result<Report> {
    let mut wb = Workbench::new(config, models)?;
    let all: Vec<usize> = (0..models.len()).collect();
    let eps = config.vaccine.epsilon;
    let mut acc = Accumulator::new();
    let wants = |a: Arm| config.arms.contains(&a);
    for i in 0..config.n_hosts {
        let host = wb.host(i);
        for j in 0..config.n_watermarks {
            let wm = wb.watermark(&[i as u64, j as u64]);
            let theta = wb.placement(i, j)?;
            let noise = wb.noise(&host, &[i as u64, j as u64])?;
            for target in models {
                let tname = &target.id.name;
                let run = |acc: &mut Accumulator, scope: &str, arm: Arm, delta: Option<&Tensor>| -> Result<()> {
                    let x = wb.protected(&host, delta)?;
                    let c = composite(&x, &wm, &theta)?;
                    let out = target.model.forward(&c.watermarked)?.restored;
                    score(acc, scope, arm, &host, &c.watermarked, &out, &c.gt_mask)
                };
                let scope = format!("tgt={tname}");
                if wants(Arm::Clean) {
                    run(&mut acc, &scope, Arm::Clean, None)?;
                }
                if wants(Arm::Rn) {
                    run(&mut acc, &scope, Arm::Rn, Some(&noise))?;
                }
                for (s, source) in models.iter().enumerate() {
                    let scope = format!("src={}/tgt={tname}", source.id.name);
                    for (arm, kind) in [(Arm::Dwv, VaccineKind::Dwv), (Arm::Iwv, VaccineKind::Iwv)] {
                        if wants(arm) {
                            let d = wb.vaccine(i, &host, &[s], kind, eps)?;
                            let x = wb.protected(&host, Some(&d))?;
                            let c = composite(&x, &wm, &theta)?;
                            let out = target.model.forward(&c.watermarked)?.restored;
                            score(&mut acc, &scope, arm, &host, &c.watermarked, &out, &c.gt_mask)?;
                        }
                    }
                }
                if wants(Arm::Dwv) {
                    for &e in &config.transfer.epsilons {
                        let mut sources: Vec<(String, Vec<usize>)> = vec![("stacked".into(), all.clone())];
                        sources.extend(models.iter().enumerate().map(|(s, m)| (m.id.name.clone(), vec![s])));
                        for (sname, set) in sources {
                            let d = wb.vaccine(i, &host, &set, VaccineKind::Dwv, e)?;
                            let x = wb.protected(&host, Some(&d))?;
                            let c = composite(&x, &wm, &theta)?;
                            let out = target.model.forward(&c.watermarked)?.restored;
                            let scope = format!("eps={}/src={sname}/tgt={tname}", eps_label(e));
                            score(&mut acc, &scope, Arm::Dwv, &host, &c.watermarked, &out, &c.gt_mask)?;
                        }
                    }
                }
            }
        }
    }
    let refs: Vec<&LoadedModel> = models.iter().collect();
    let notes = vec![
        format!("{} hosts x {} watermarks per target", config.n_hosts, config.n_watermarks),
        "stacked vaccines follow the mean of the constituent models' losses".into(),
        "eps labels are budgets in units of 1/255".into(),
    ];
    wb.report("transferability".into(), "transferability", &refs, acc.rows(), notes)
}

/// JPEG and blur applied to protected-then-watermarked images before
/// removal, on the primary model. Scopes are `jpeg=Q` and `blur=R`.
pub fn run_robustness(config: &ExperimentConfig) -> Result<Report> {
    robustness_with(config, &load_models(config)?)
}

enum Transform {
    Jpeg(u8),
    Blur(f32),
}

impl Transform {
    fn scope(&self) -> String {
        match self {
            Transform::Jpeg(q) => format!("jpeg={q}"),
            Transform::Blur(r) => format!("blur={}", float_label(*r)),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match *self {
            // Quality is 100 minus the compression ratio: 100 is uncompressed.
            Transform::Jpeg(100) => Ok(x.clone()),
            Transform::Jpeg(q) => jpeg_roundtrip(x, q),
            Transform::Blur(r) => gaussian_blur(x, f64::from(r)),
        }
    }
}

pub fn robustness_with(config: &ExperimentConfig, models: &[LoadedModel]) -> Result<Report> {
    let mut wb = Workbench::new(config, models)?;
    let r = &config.robustness;
    let transforms: Vec<Transform> = r
        .qualities
        .iter()
        .map(|&q| Transform::Jpeg(q))
        .chain(r.radii.iter().map(|&s| Transform::Blur(s)))
        .collect();
    let model = &models[0];
    let mut acc = Accumulator::new();
    for i in 0..config.n_hosts {
        let host = wb.host(i);
        for j in 0..config.n_watermarks {
            let wm = wb.watermark(&[i as u64, j as u64]);
            let theta = wb.placement(i, j)?;
            for (arm, delta) in wb.arm_deltas(i, &host, &[0], &[i as u64, j as u64])? {
                let x = wb.protected(&host, delta.as_ref())?;
                let c = composite(&x, &wm, &theta)?;
                for t in &transforms {
                    let y = t.apply(&c.watermarked)?;
                    let out = model.model.forward(&y)?.restored;
                    score(&mut acc, &t.scope(), arm, &host, &y, &out, &c.gt_mask)?;
                }
            }
        }
    }
    let notes = vec![
        "jpeg quality = 100 - compression ratio; quality 100 means no compression".into(),
        "blur radius is the Gaussian sigma".into(),
        "the watermarked reference is the transformed image the remover receives".into(),
    ];
    wb.report("robustness".into(), "robustness", &[model], acc.rows(), notes)
}
