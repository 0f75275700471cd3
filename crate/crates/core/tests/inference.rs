use std::collections::HashMap;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use radar_core::grid::{preset_schedule, Extent, TokenGrid};
use radar_core::infer::{
    constrained_decode, decode, extrapolate_decode, extrapolate_schedule, known_outside, raster_decode, sample_token,
    CorrectionMode, DecodeState, SamplerConfig, StepAttention,
};
use radar_core::model::{Model, ModelConfig};
use radar_core::par::Exec;
use radar_core::train::{SourceKind, SyntheticSource, TrainConfig, Trainer};

/// Desk model trained on the constant source, shared across tests.
fn constant_model() -> &'static Model<f32> {
    static M: OnceLock<Model<f32>> = OnceLock::new();
    M.get_or_init(|| {
        let mut cfg = TrainConfig::desk();
        cfg.source = SourceKind::Constant;
        cfg.epochs = 2;
        cfg.grids_per_epoch = 1024;
        let src = SyntheticSource::new(SourceKind::Constant, 16, 4, 8, 8).unwrap();
        let mut tr = Trainer::new(cfg, src, Exec::Parallel).unwrap();
        tr.run(|_| {}).unwrap();
        tr.model
    })
}

fn random_model(seed: u64) -> Model<f32> {
    let cfg = ModelConfig {
        vocab_size: 16,
        num_classes: 4,
        dim: 16,
        num_layers: 2,
        num_heads: 2,
        max_grid: (8, 8),
        max_steps: 8,
        ..ModelConfig::default()
    };
    let mut m = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    // a zero head would make every logit equal
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    m.params.head_w.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
    m
}

#[test]
fn temperature_zero_is_deterministic_and_seed_free() {
    let m = random_model(1);
    let s = preset_schedule("center", 8, 8).unwrap();
    let a = SamplerConfig { temperature: 0.0, seed: 1, ..Default::default() };
    let b = SamplerConfig { seed: 99, ..a.clone() };
    assert_eq!(decode(&m, 2, &s, &a).unwrap().0, decode(&m, 2, &s, &b).unwrap().0);
    let warm = SamplerConfig { temperature: 1.0, ..a.clone() };
    assert_eq!(decode(&m, 2, &s, &warm).unwrap().0, decode(&m, 2, &s, &warm).unwrap().0);
}

#[test]
fn correction_off_keeps_interiors() {
    let m = random_model(2);
    let s = preset_schedule("center", 8, 8).unwrap();
    let sampler = SamplerConfig { correction: CorrectionMode::Off, ..Default::default() };
    let mut st = DecodeState::new(&m, 0, &s, &sampler).unwrap();
    let mut prev: Option<TokenGrid> = None;
    while !st.is_done() {
        st.step(&m, None).unwrap();
        if let (Some(p), Some(e)) = (&prev, s.extents().get(st.cursor.wrapping_sub(2))) {
            for (r, c) in e.positions() {
                assert_eq!(st.current.get(r, c), p.get(r, c));
            }
        }
        prev = Some(st.current.clone());
    }
    assert!(st.revision_log.is_empty());
}

#[test]
fn revisions_touch_only_earlier_cells() {
    let m = random_model(3);
    let s = preset_schedule("center", 8, 8).unwrap();
    let sampler = SamplerConfig { correction: CorrectionMode::Greedy, seed: 4, ..Default::default() };
    let (_, st) = decode(&m, 1, &s, &sampler).unwrap();
    assert!(!st.revision_log.is_empty(), "random weights should disagree with sampled tokens");
    for rev in &st.revision_log {
        assert!(rev.step > 0);
        let born = st.born[rev.row * 8 + rev.col].unwrap();
        assert!(born < rev.step, "{rev:?} born at {born}");
        assert!(s.extents()[rev.step - 1].contains(rev.row, rev.col));
        assert_ne!(rev.old, rev.new);
        let line = rev.tsv();
        let fields: Vec<usize> = line.split('\t').map(|f| f.parse().unwrap()).collect();
        assert_eq!(fields, vec![rev.step, rev.row, rev.col, rev.old as usize, rev.new as usize]);
    }
}

#[test]
fn sampling_matches_softmax_frequencies() {
    let logits = [0.5f32, -1.0, 1.5, 0.0, -0.3];
    let t = 0.8;
    let max = 1.5f64;
    let w: Vec<f64> = logits.iter().map(|&l| ((l as f64 - max) / t).exp()).collect();
    let z: f64 = w.iter().sum();
    let p: Vec<f64> = w.iter().map(|x| x / z).collect();
    let s = SamplerConfig { temperature: t, ..Default::default() };
    let n = 100_000;
    let mut counts = [0usize; 5];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..n {
        counts[sample_token(&logits, &s, &mut rng).unwrap() as usize] += 1;
    }
    for k in 0..5 {
        let f = counts[k] as f64 / n as f64;
        let sd = (p[k] * (1.0 - p[k]) / n as f64).sqrt();
        assert!((f - p[k]).abs() < 3.0 * sd.max(1e-4), "token {k}: {f} vs {}", p[k]);
    }
}

#[test]
fn top_k_restricts_support() {
    let logits = [0.5f32, -1.0, 1.5, 0.0, -0.3];
    let s = SamplerConfig { top_k: Some(2), temperature: 5.0, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..2000 {
        let t = sample_token(&logits, &s, &mut rng).unwrap();
        assert!(t == 0 || t == 2);
    }
    let m = random_model(4);
    let sched = preset_schedule("center", 8, 8).unwrap();
    for bad in [
        SamplerConfig { top_k: Some(0), ..Default::default() },
        SamplerConfig { top_k: Some(17), ..Default::default() },
        SamplerConfig { temperature: -1.0, ..Default::default() },
        SamplerConfig { cfg_scale: Some(0.5), ..Default::default() },
    ] {
        assert!(decode(&m, 0, &sched, &bad).is_err(), "{bad:?}");
    }
}

#[test]
fn known_cells_bound_the_output() {
    let m = random_model(5);
    let s = preset_schedule("center", 8, 8).unwrap();
    let sampler = SamplerConfig { seed: 7, ..Default::default() };
    let base = TokenGrid::new(8, 8, 16, (0..64).map(|i| (i * 7 % 16) as u32).collect()).unwrap();
    let all = known_outside(&base, &[]);
    assert_eq!(constrained_decode(&m, 0, &s, &all, &sampler).unwrap().0, base);
    let none = HashMap::new();
    assert_eq!(constrained_decode(&m, 0, &s, &none, &sampler).unwrap().0, decode(&m, 0, &s, &sampler).unwrap().0);
    let bad = HashMap::from([((8, 0), 1u32)]);
    assert!(constrained_decode(&m, 0, &s, &bad, &sampler).is_err());
}

#[test]
fn trained_model_out_paints_the_constant() {
    let m = constant_model();
    let s = preset_schedule("center", 8, 8).unwrap();
    let (mut right, mut cells) = (0usize, 0usize);
    for class in 0..4u32 {
        let constant = class * 4;
        let base = TokenGrid::filled(8, 8, 16, constant).unwrap();
        let known = known_outside(&base, &[Extent::new(0, 4, 8, 8).unwrap()]);
        for seed in 0..4 {
            let sampler = SamplerConfig { seed, ..Default::default() };
            let (g, _) = constrained_decode(m, class as usize, &s, &known, &sampler).unwrap();
            for r in 0..8 {
                for c in 4..8 {
                    right += (g.get(r, c) == constant) as usize;
                    cells += 1;
                }
            }
        }
    }
    let frac = right as f64 / cells as f64;
    assert!(frac > 0.9, "right half matches constant in {frac}");
}

#[test]
fn extrapolation_adds_one_step_per_ring() {
    let m = random_model(6);
    let s = preset_schedule("center", 8, 8).unwrap();
    let same = extrapolate_schedule(&s, 8, 8).unwrap();
    assert_eq!(same.extents(), s.extents());
    let sampler = SamplerConfig { seed: 8, ..Default::default() };
    assert_eq!(extrapolate_decode(&m, 0, &s, 8, 8, &sampler).unwrap().0, decode(&m, 0, &s, &sampler).unwrap().0);

    let s16 = preset_schedule("center", 16, 16).unwrap();
    let big = extrapolate_schedule(&s16, 24, 24).unwrap();
    assert_eq!(big.len(), s16.len() + 4);
    m.reset_forward_count();
    let (g, _) = extrapolate_decode(&m, 0, &s, 12, 12, &sampler).unwrap();
    assert_eq!(m.forward_count() as usize, s.len() + 2);
    assert_eq!((g.height(), g.width()), (12, 12));
    assert!(extrapolate_schedule(&s, 6, 8).is_err());
}

#[test]
fn cache_holds_every_fed_position() {
    let m = random_model(7);
    let s = preset_schedule("center", 8, 8).unwrap();
    for attention in [StepAttention::Unrestricted, StepAttention::Nested] {
        let sampler = SamplerConfig { attention, cfg_scale: Some(2.0), ..Default::default() };
        let mut st = DecodeState::new(&m, 0, &s, &sampler).unwrap();
        let mut expect = 1;
        while !st.is_done() {
            expect += s.extents()[st.cursor].area();
            st.step(&m, None).unwrap();
            assert_eq!(st.cache.len(), expect);
            assert_eq!(st.uncond_cache.as_ref().unwrap().len(), expect);
        }
    }
}

#[test]
fn guidance_doubles_forwards_and_raster_takes_one_per_cell() {
    let m = random_model(8);
    let s = preset_schedule("center", 8, 8).unwrap();
    m.reset_forward_count();
    decode(&m, 1, &s, &SamplerConfig { cfg_scale: Some(1.5), ..Default::default() }).unwrap();
    assert_eq!(m.forward_count() as usize, 2 * s.len());
    m.reset_forward_count();
    let g = raster_decode(&m, 1, 8, 8, &SamplerConfig::default()).unwrap();
    assert_eq!(m.forward_count(), 64);
    assert_eq!((g.height(), g.width()), (8, 8));
}
