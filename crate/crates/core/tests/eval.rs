use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use radar_core::eval::{
    bench_radial, bench_raster, correction_probe, correction_stats, heldout_nll, raster_nll, train_and_score,
    BenchReport, BenchRow, CorrectionRecord,
};
use radar_core::grid::{preset_schedule, TokenGrid};
use radar_core::infer::{decode, CorrectionMode, SamplerConfig, StepAttention};
use radar_core::mask::MaskKind;
use radar_core::model::Model;
use radar_core::par::Exec;
use radar_core::train::{SourceKind, SyntheticSource, TrainConfig};

fn setup() -> (Model<f32>, SyntheticSource) {
    let cfg = TrainConfig::desk();
    let m = Model::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    (m, SyntheticSource::new(SourceKind::QuantizedField, 16, 4, 8, 8).unwrap())
}

#[test]
fn untrained_model_scores_uniform() {
    let (m, src) = setup();
    let ln_v = 16f64.ln();
    let s = preset_schedule("center", 8, 8).unwrap();
    for mask in [MaskKind::Nested, MaskKind::BlockCausal] {
        let r = heldout_nll(&m, &src, &s, mask, 32, 1, Exec::Parallel).unwrap();
        assert!((r.nll - ln_v).abs() < 0.01 && (r.border_nll - ln_v).abs() < 0.01, "{r:?}");
    }
    let r = raster_nll(&m, &src, 32, 1, Exec::Parallel).unwrap();
    assert!((r.nll - ln_v).abs() < 0.01, "{r:?}");
    assert_eq!(r.positions, 32 * 64);
}

#[test]
fn per_step_sums_follow_the_schedule_geometry() {
    let (mut m, src) = setup();
    m.params.head_b[3] = 2.0;
    let s = preset_schedule("center", 8, 8).unwrap();
    let grids = 12;
    let r = heldout_nll(&m, &src, &s, MaskKind::Nested, grids, 2, Exec::Sequential).unwrap();
    assert_eq!(r.per_step.len(), s.len());
    for (k, &(_, n)) in r.per_step.iter().enumerate() {
        assert_eq!(n, grids * s.extents()[k].area());
    }
    let total: f64 = r.per_step.iter().map(|p| p.0).sum();
    let count: usize = r.per_step.iter().map(|p| p.1).sum();
    assert_eq!(count, r.positions);
    assert!((total / count as f64 - r.nll).abs() < 1e-6);
    // interiors are scored on top of one border position per cell
    assert!(r.positions > grids * 64);
}

#[test]
fn evaluation_does_not_depend_on_exec() {
    let (m, src) = setup();
    let s = preset_schedule("center", 8, 8).unwrap();
    let a = heldout_nll(&m, &src, &s, MaskKind::Nested, 16, 3, Exec::Sequential).unwrap();
    let b = heldout_nll(&m, &src, &s, MaskKind::Nested, 16, 3, Exec::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn stats_rate_is_a_fraction() {
    let (m, src) = setup();
    let s = preset_schedule("center", 8, 8).unwrap();
    let mut m = m;
    m.params.head_w.iter_mut().enumerate().for_each(|(i, w)| *w = ((i * 37 % 11) as f32 - 5.0) * 0.2);
    let on = correction_probe(&m, &src, &s, CorrectionMode::Greedy, StepAttention::Unrestricted, 40, 4, Exec::Parallel)
        .unwrap();
    assert!((0.0..=1.0).contains(&on.stats.revision_rate));
    assert!((-1.0..=1.0).contains(&on.stats.revision_benefit));
    let off =
        correction_probe(&m, &src, &s, CorrectionMode::Off, StepAttention::Nested, 40, 4, Exec::Parallel).unwrap();
    assert_eq!(off.stats.revision_rate, 0.0);
    assert_eq!(off.stats.revisions, 0);
    assert_eq!(off.recovery, 0.0);
    assert!((off.chance - 1.0 / 15.0).abs() < 1e-12);

    let truth = TokenGrid::filled(8, 8, 16, 0).unwrap();
    let (_, st) = decode(&m, 0, &s, &SamplerConfig::default()).unwrap();
    let stats = correction_stats(&[CorrectionRecord::from_state(&st, &truth)]);
    assert_eq!(stats.revisions, st.revision_log.len());
    assert_eq!(stats.exposures, st.exposures);
}

#[test]
fn training_and_scoring_is_reproducible() {
    let mut cfg = TrainConfig::desk();
    cfg.epochs = 1;
    cfg.grids_per_epoch = 64;
    let src = SyntheticSource::new(SourceKind::QuantizedField, 16, 4, 8, 8).unwrap();
    let a = train_and_score("a", &cfg, &src, 16, Exec::Parallel).unwrap();
    let b = train_and_score("a", &cfg, &src, 16, Exec::Sequential).unwrap();
    assert_eq!(a, b);
    assert!(a.nll.border_nll < 16f64.ln());
}

#[test]
fn bench_rows_count_forwards_exactly() {
    let (m, _) = setup();
    let s = preset_schedule("center", 8, 8).unwrap();
    let sampler = SamplerConfig::default();
    let radial = bench_radial(&m, "center", &s, &sampler, 0, 2).unwrap();
    assert_eq!((radial.steps, radial.forwards), (4, 4));
    let guided = bench_radial(&m, "g", &s, &SamplerConfig { cfg_scale: Some(2.0), ..sampler.clone() }, 0, 1).unwrap();
    assert_eq!(guided.forwards, 8);
    let raster = bench_raster(&m, 8, 8, &sampler, 0, 2).unwrap();
    assert_eq!((raster.steps, raster.forwards), (64, 64));
    assert!(radial.wallclock_s > 0.0 && radial.grids_per_s > 0.0);
    assert_eq!(radial.params, m.params.num_params());
}

#[test]
fn report_manifest_regenerates_settings() {
    let mut rep = BenchReport::default();
    rep.rows.push(BenchRow { heldout_nll: Some(1.5), ..BenchRow::new("center", 10) });
    rep.note("seed", 7);
    rep.note("schedule", "center");
    let text = rep.manifest_text();
    let parsed: Vec<(&str, &str)> = text.lines().map(|l| l.split_once('=').unwrap()).collect();
    assert_eq!(parsed, vec![("seed", "7"), ("schedule", "center")]);
    let tsv = rep.to_tsv();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines.len(), 2);
    let cols = BenchReport::HEADER.split('\t').count();
    assert!(lines.iter().all(|l| l.split('\t').count() == cols));
    assert!(lines[1].contains("1.500000"));
}
