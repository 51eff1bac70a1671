use std::fmt::Write as _;

use a2rnet::adversary::{pgd_attack_batch, PerturbationBudget};
use a2rnet::image_io::{encode_pgm, encode_ycbcr_as_ppm, ImagePair};
use a2rnet::labels::INDEX_FILE;
use a2rnet::metrics::{self, signal_map, waveform_distance, Condition, MetricsReport, MetricsRow};
use a2rnet::network::fuse as fuse_net;
use a2rnet::training::TrainRun;

use crate::run::{pad_all, CliResult, Padded, Run};
use crate::Common;

fn inputs(padded: &[Padded]) -> Vec<ImagePair> {
    padded.iter().map(|p| p.pair.clone()).collect()
}

pub fn train(common: &Common, resume: bool) -> CliResult<()> {
    let mut run = Run::start("train", common)?;
    let pairs = run.load_pairs()?;
    let padded = inputs(&pad_all(&pairs)?);
    let labels = run.labels(&padded)?;
    let (net, cfg) = (run.cfg.network.clone(), run.cfg.train);
    let mut state = if resume {
        TrainRun::load(&run.out, &net)?
    } else {
        let fresh = TrainRun::fresh(&net, &cfg)?;
        fresh.save(&run.out)?;
        fresh
    };
    eprintln!(
        "training {} pairs for {} epochs ({} done)",
        padded.len(),
        cfg.epochs,
        state.epochs_done
    );
    state.run(&net, &cfg, &padded, &labels, Some(&run.out), |s| {
        eprintln!(
            "epoch {:>3}  clean {:.5}  adversarial {:.5}  {:.1}s",
            s.epoch, s.mean_clean_loss, s.mean_adv_loss, s.wall_seconds
        );
    })?;
    for path in state.save(&run.out)? {
        run.record(path);
    }
    run.finish()
}

pub fn fuse(common: &Common) -> CliResult<()> {
    let mut run = Run::start("fuse", common)?;
    let params = run.load_checkpoint()?;
    let pairs = run.load_pairs()?;
    for (orig, p) in pairs.iter().zip(pad_all(&pairs)?) {
        let fused = p.crop(&fuse_net(&params, &run.cfg.network, &p.pair.ir, &p.pair.vis_y)?)?;
        run.write(format!("fused/{}.pgm", p.pair.id), &encode_pgm(&fused)?)?;
        if let Some(cbcr) = &orig.vis_cbcr {
            run.write(format!("fused/{}.ppm", p.pair.id), &encode_ycbcr_as_ppm(&fused, cbcr)?)?;
        }
    }
    run.finish()
}

pub fn attack(common: &Common) -> CliResult<()> {
    let mut run = Run::start("attack", common)?;
    let params = run.load_checkpoint()?;
    let pairs = run.load_pairs()?;
    let padded = pad_all(&pairs)?;
    let labels = run.labels(&inputs(&padded))?;
    let (net, weights) = (run.cfg.network.clone(), run.cfg.train.weights);
    let mut summary = String::from("id,clean_loss,attacked_loss\n");
    for (k, (p, label)) in padded.iter().zip(&labels).enumerate() {
        let budget = PerturbationBudget {
            start_seed: run.cfg.train.seed.wrapping_add(k as u64),
            ..run.cfg.eval_budget()
        };
        let (ir, vis) = (&p.pair.ir, &p.pair.vis_y);
        let attack = pgd_attack_batch(&params, &net, ir, vis, label, &budget, &weights)?;
        let adv_ir = ir.zip_map(&attack.delta_ir, |x, d| x + d)?;
        let adv_vis = vis.zip_map(&attack.delta_vis, |x, d| x + d)?;
        let clean = fuse_net(&params, &net, ir, vis)?;
        let attacked = fuse_net(&params, &net, &adv_ir, &adv_vis)?;
        let id = &p.pair.id;
        run.write(format!("adversarial/{id}_ir.pgm"), &encode_pgm(&p.crop(&adv_ir)?)?)?;
        run.write(format!("adversarial/{id}_vis.pgm"), &encode_pgm(&p.crop(&adv_vis)?)?)?;
        run.write(format!("fused/{id}_clean.pgm"), &encode_pgm(&p.crop(&clean)?)?)?;
        run.write(format!("fused/{id}_attacked.pgm"), &encode_pgm(&p.crop(&attacked)?)?)?;
        let trace = &attack.loss_traces[0];
        let mut csv = String::from("iter,loss\n");
        for (i, l) in trace.iter().enumerate() {
            let _ = writeln!(csv, "{i},{l}");
        }
        run.write(format!("traces/{id}.csv"), csv.as_bytes())?;
        let _ = writeln!(summary, "{id},{},{}", trace[0], trace[trace.len() - 1]);
        eprintln!("{id}: loss {:.5} -> {:.5}", trace[0], trace[trace.len() - 1]);
    }
    run.write("attack_summary.csv", summary.as_bytes())?;
    run.finish()
}

/// Recomputes the rows of padded pairs on their original extents; the
/// losses stay those of the padded frame the attack ran on.
fn crop_report(report: MetricsReport, pairs: &[ImagePair], padded: &[Padded]) -> CliResult<MetricsReport> {
    let mut rows = Vec::with_capacity(report.rows.len());
    let mut outputs = Vec::with_capacity(report.outputs.len());
    for (k, mut out) in report.outputs.into_iter().enumerate() {
        let (clean_row, attacked_row) = (&report.rows[2 * k], &report.rows[2 * k + 1]);
        let p = &padded[k];
        if p.is_padded() {
            out.fused_clean = p.crop(&out.fused_clean)?;
            out.fused_attacked = p.crop(&out.fused_attacked)?;
            out.attacked_ir = p.crop(&out.attacked_ir)?;
            out.attacked_vis = p.crop(&out.attacked_vis)?;
            out.clean_map = signal_map(&out.fused_clean)?;
            out.attacked_map = signal_map(&out.fused_attacked)?;
            let dist = waveform_distance(&out.clean_map, &out.attacked_map)?;
            rows.push(MetricsRow::compute(&pairs[k], Condition::Clean, &out.fused_clean, 0.0, clean_row.loss)?);
            rows.push(MetricsRow::compute(
                &pairs[k],
                Condition::Attacked,
                &out.fused_attacked,
                dist,
                attacked_row.loss,
            )?);
        } else {
            rows.push(clean_row.clone());
            rows.push(attacked_row.clone());
        }
        outputs.push(out);
    }
    Ok(MetricsReport { rows, outputs })
}

pub fn evaluate(common: &Common) -> CliResult<()> {
    let mut run = Run::start("evaluate", common)?;
    let params = run.load_checkpoint()?;
    let pairs = run.load_pairs()?;
    let padded = pad_all(&pairs)?;
    let inputs = inputs(&padded);
    let labels = run.labels(&inputs)?;
    let budget = PerturbationBudget {
        start_seed: run.cfg.train.seed,
        ..run.cfg.eval_budget()
    };
    let report = metrics::evaluate(
        &params,
        &run.cfg.network,
        &inputs,
        &labels,
        &budget,
        &run.cfg.train.weights,
        run.cfg.eval_batch,
    )?;
    let report = crop_report(report, &pairs, &padded)?;
    run.write("metrics.csv", report.to_csv().as_bytes())?;
    run.write("metrics.json", (report.aggregate_json()? + "\n").as_bytes())?;
    for out in &report.outputs {
        run.write(format!("waveforms/{}.csv", out.id), MetricsReport::waveform_csv(out).as_bytes())?;
        run.write(format!("fused/{}_clean.pgm", out.id), &encode_pgm(&out.fused_clean)?)?;
        run.write(format!("fused/{}_attacked.pgm", out.id), &encode_pgm(&out.fused_attacked)?)?;
    }
    eprintln!(
        "mean loss clean {:.5} attacked {:.5}; mean signal distance {:.5}",
        report.mean_loss(Condition::Clean),
        report.mean_loss(Condition::Attacked),
        report.mean_signal_distance()
    );
    run.finish()
}

pub fn label_gen(common: &Common) -> CliResult<()> {
    let mut run = Run::start("label-gen", common)?;
    let pairs = run.load_pairs()?;
    let padded = inputs(&pad_all(&pairs)?);
    run.labels(&padded)?;
    let dir = run.label_dir();
    for p in &padded {
        run.record(dir.join(format!("{}.pgm", p.id)));
        run.record(dir.join(format!("{}.f64", p.id)));
    }
    run.record(dir.join(INDEX_FILE));
    eprintln!("{} labels in {}", padded.len(), dir.display());
    run.finish()
}
