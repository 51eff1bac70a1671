//! Fusion-quality metrics and clean-vs-attacked robustness reports.
//!
//! Metrics of fused outputs are computed on the 8-bit images that get
//! written to disk, so a report can be recomputed from the saved PGMs.

use std::fmt::Write as _;

use serde::Serialize;

use crate::adversary::{pgd_attack_batch, PerturbationBudget};
use crate::error::{Error, Result};
use crate::image_io::{quantize, quantize_tensor, ImagePair};
use crate::losses::{base_loss_value, LossWeights};
use crate::network::{fuse, ModelParams, NetworkConfig};
use crate::tensor::Tensor;

/// Shannon entropy in bits of the 256-bin histogram of the 8-bit image.
pub fn entropy(img: &Tensor) -> Result<f64> {
    let mut hist = [0usize; 256];
    for &v in img.data() {
        hist[quantize(v)? as usize] += 1;
    }
    let n = img.numel() as f64;
    Ok(hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * (1.0 / p).log2()
        })
        .sum())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

/// Population standard deviation.
pub fn std_dev(img: &Tensor) -> f64 {
    let x = img.data();
    if is_constant(x) {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

pub const PSNR_CAP: f64 = 100.0;

/// `10·log10(1/mse)` for unit peak, capped at 100 dB when `mse < 1e-10`.
pub fn psnr(fused: &Tensor, reference: &Tensor) -> Result<f64> {
    let se = fused.zip_map(reference, |a, b| (a - b) * (a - b))?;
    let mse = mean(se.data());
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub fn pearson_r(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "pearson_r: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let (x, y) = (a.data(), b.data());
    if x.is_empty() || is_constant(x) || is_constant(y) {
        return Err(Error::UndefinedCorrelation(
            "an input to pearson_r has zero variance".into(),
        ));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (u, v) in x.iter().zip(y) {
        let (du, dv) = (u - mx, v - my);
        sxy += du * dv;
        sxx += du * du;
        syy += dv * dv;
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Mean of the correlations of `fused` with each source.
pub fn cc(fused: &Tensor, ir: &Tensor, vis: &Tensor) -> Result<f64> {
    Ok((pearson_r(fused, ir)? + pearson_r(fused, vis)?) / 2.0)
}

/// Sum of the correlations of differences.
pub fn scd(fused: &Tensor, ir: &Tensor, vis: &Tensor) -> Result<f64> {
    let d_vis = fused.zip_map(vis, |f, v| f - v)?;
    let d_ir = fused.zip_map(ir, |f, i| f - i)?;
    Ok(pearson_r(&d_vis, ir)? + pearson_r(&d_ir, vis)?)
}

/// Column-mean intensity waveform of a `1×1×h×w` image.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SignalMap {
    pub waveform: Vec<f64>,
}

pub fn signal_map(img: &Tensor) -> Result<SignalMap> {
    let s = img.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 1 {
        return Err(Error::Dimension(format!(
            "signal map needs a 1×1×h×w image, got {s:?}"
        )));
    }
    let (h, w) = (s[2], s[3]);
    let d = img.data();
    let waveform = (0..w)
        .map(|j| (0..h).map(|i| d[i * w + j]).sum::<f64>() / h as f64)
        .collect();
    Ok(SignalMap { waveform })
}

/// Root-mean-square difference of two waveforms.
pub fn waveform_distance(a: &SignalMap, b: &SignalMap) -> Result<f64> {
    if a.waveform.len() != b.waveform.len() {
        return Err(Error::Dimension(format!(
            "waveform widths {} and {} differ",
            a.waveform.len(),
            b.waveform.len()
        )));
    }
    let n = a.waveform.len().max(1) as f64;
    Ok((a.waveform
        .iter()
        .zip(&b.waveform)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
        .sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Clean,
    Attacked,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Attacked => "attacked",
        }
    }
}

/// One report row. Correlation metrics are `None` where undefined.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub id: String,
    pub condition: Condition,
    pub en: f64,
    pub sd: f64,
    pub psnr_ir: f64,
    pub psnr_vis: f64,
    pub psnr_mean: f64,
    pub cc: Option<f64>,
    pub scd: Option<f64>,
    pub signal_distance: f64,
    /// Base loss of the fused output against the pseudo-label.
    pub loss: f64,
}

impl MetricsRow {
    /// Metrics of `fused` against the clean sources of `pair`.
    pub fn compute(
        pair: &ImagePair,
        condition: Condition,
        fused: &Tensor,
        signal_distance: f64,
        loss: f64,
    ) -> Result<Self> {
        let defined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedCorrelation(_)) => Ok(None),
            Err(e) => Err(e),
        };
        let psnr_ir = psnr(fused, &pair.ir)?;
        let psnr_vis = psnr(fused, &pair.vis_y)?;
        Ok(Self {
            id: pair.id.clone(),
            condition,
            en: entropy(fused)?,
            sd: std_dev(fused),
            psnr_ir,
            psnr_vis,
            psnr_mean: (psnr_ir + psnr_vis) / 2.0,
            cc: defined(cc(fused, &pair.ir, &pair.vis_y))?,
            scd: defined(scd(fused, &pair.ir, &pair.vis_y))?,
            signal_distance,
            loss,
        })
    }
}

/// Per-pair fused images and waveforms for both conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct PairOutputs {
    pub id: String,
    pub fused_clean: Tensor,
    pub fused_attacked: Tensor,
    pub attacked_ir: Tensor,
    pub attacked_vis: Tensor,
    pub clean_map: SignalMap,
    pub attacked_map: SignalMap,
    pub loss_trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub outputs: Vec<PairOutputs>,
}

pub const REPORT_COLUMNS: [&str; 10] = [
    "id",
    "condition",
    "EN",
    "SD",
    "PSNR_ir",
    "PSNR_vis",
    "PSNR_mean",
    "CC",
    "SCD",
    "signal_distance",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub stddev: f64,
    /// Rows contributing (undefined cells are skipped).
    pub count: usize,
}

fn stats(values: impl Iterator<Item = Option<f64>>) -> ColumnStats {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        return ColumnStats {
            mean: f64::NAN,
            stddev: f64::NAN,
            count: 0,
        };
    }
    let m = mean(&v);
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    ColumnStats {
        mean: m,
        stddev: var.sqrt(),
        count: v.len(),
    }
}

impl MetricsReport {
    pub fn rows_for(&self, condition: Condition) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(move |r| r.condition == condition)
    }

    pub fn mean_loss(&self, condition: Condition) -> f64 {
        let v: Vec<f64> = self.rows_for(condition).map(|r| r.loss).collect();
        mean(&v)
    }

    pub fn mean_signal_distance(&self) -> f64 {
        let v: Vec<f64> = self
            .rows_for(Condition::Attacked)
            .map(|r| r.signal_distance)
            .collect();
        mean(&v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = REPORT_COLUMNS.join(",");
        s.push('\n');
        let cell = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| x.to_string());
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.id,
                r.condition.as_str(),
                r.en,
                r.sd,
                r.psnr_ir,
                r.psnr_vis,
                r.psnr_mean,
                cell(r.cc),
                cell(r.scd),
                r.signal_distance
            );
        }
        s
    }

    /// Mean and standard deviation of every numeric column per condition.
    pub fn aggregate_json(&self) -> Result<String> {
        let mut root = serde_json::Map::new();
        for cond in [Condition::Clean, Condition::Attacked] {
            let rows: Vec<&MetricsRow> = self.rows_for(cond).collect();
            let col = |f: &dyn Fn(&MetricsRow) -> Option<f64>| stats(rows.iter().map(|r| f(r)));
            let mut m = serde_json::Map::new();
            let columns: [(&str, ColumnStats); 9] = [
                ("EN", col(&|r| Some(r.en))),
                ("SD", col(&|r| Some(r.sd))),
                ("PSNR_ir", col(&|r| Some(r.psnr_ir))),
                ("PSNR_vis", col(&|r| Some(r.psnr_vis))),
                ("PSNR_mean", col(&|r| Some(r.psnr_mean))),
                ("CC", col(&|r| r.cc)),
                ("SCD", col(&|r| r.scd)),
                ("signal_distance", col(&|r| Some(r.signal_distance))),
                ("loss", col(&|r| Some(r.loss))),
            ];
            for (name, st) in columns {
                m.insert(
                    name.to_string(),
                    serde_json::to_value(st).map_err(|e| Error::validation(e.to_string()))?,
                );
            }
            m.insert("rows".into(), rows.len().into());
            root.insert(cond.as_str().into(), m.into());
        }
        serde_json::to_string_pretty(&root).map_err(|e| Error::validation(e.to_string()))
    }

    /// `column_index,clean_value,attacked_value` for one pair.
    pub fn waveform_csv(out: &PairOutputs) -> String {
        let mut s = String::from("column_index,clean_value,attacked_value\n");
        for (j, (c, a)) in out
            .clean_map
            .waveform
            .iter()
            .zip(&out.attacked_map.waveform)
            .enumerate()
        {
            let _ = writeln!(s, "{j},{c},{a}");
        }
        s
    }
}

/// Fuses every pair clean and under PGD with `budget`, and scores both.
/// Attacks run in batches of `batch` pairs; pairs in a batch must share
/// their extents.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &ModelParams,
    cfg: &NetworkConfig,
    pairs: &[ImagePair],
    labels: &[Tensor],
    budget: &PerturbationBudget,
    weights: &LossWeights,
    batch: usize,
) -> Result<MetricsReport> {
    if pairs.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} pairs but {} labels",
            pairs.len(),
            labels.len()
        )));
    }
    let mut rows = Vec::with_capacity(2 * pairs.len());
    let mut outputs = Vec::with_capacity(pairs.len());
    let idx: Vec<usize> = (0..pairs.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let same = chunk
            .iter()
            .all(|&i| pairs[i].ir.shape() == pairs[chunk[0]].ir.shape());
        let groups: Vec<Vec<usize>> = if same {
            vec![chunk.to_vec()]
        } else {
            chunk.iter().map(|&i| vec![i]).collect()
        };
        for group in groups {
            let st = |f: &dyn Fn(&ImagePair) -> &Tensor| {
                let items: Vec<&Tensor> = group.iter().map(|&i| f(&pairs[i])).collect();
                Tensor::stack_batch(&items)
            };
            let ir = st(&|p| &p.ir)?;
            let vis = st(&|p| &p.vis_y)?;
            let items: Vec<&Tensor> = group.iter().map(|&i| &labels[i]).collect();
            let label = Tensor::stack_batch(&items)?;
            let attack = pgd_attack_batch(params, cfg, &ir, &vis, &label, budget, weights)?;
            let adv_ir = ir.zip_map(&attack.delta_ir, |x, d| x + d)?;
            let adv_vis = vis.zip_map(&attack.delta_vis, |x, d| x + d)?;
            let clean = fuse(params, cfg, &ir, &vis)?.unstack_batch();
            let attacked = fuse(params, cfg, &adv_ir, &adv_vis)?.unstack_batch();
            let adv_ir = adv_ir.unstack_batch();
            let adv_vis = adv_vis.unstack_batch();
            for (k, &i) in group.iter().enumerate() {
                let pair = &pairs[i];
                let fc = quantize_tensor(&clean[k])?;
                let fa = quantize_tensor(&attacked[k])?;
                let clean_map = signal_map(&fc)?;
                let attacked_map = signal_map(&fa)?;
                let dist = waveform_distance(&clean_map, &attacked_map)?;
                let lc = base_loss_value(&clean[k], &labels[i], weights)?;
                let la = base_loss_value(&attacked[k], &labels[i], weights)?;
                rows.push(MetricsRow::compute(pair, Condition::Clean, &fc, 0.0, lc)?);
                rows.push(MetricsRow::compute(pair, Condition::Attacked, &fa, dist, la)?);
                outputs.push(PairOutputs {
                    id: pair.id.clone(),
                    fused_clean: fc,
                    fused_attacked: fa,
                    attacked_ir: adv_ir[k].clone(),
                    attacked_vis: adv_vis[k].clone(),
                    clean_map,
                    attacked_map,
                    loss_trace: attack.loss_traces[k].clone(),
                });
            }
        }
    }
    Ok(MetricsReport { rows, outputs })
}
