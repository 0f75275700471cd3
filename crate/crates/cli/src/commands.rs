//! Subcommand implementations.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use radar_core::checkpoint::Container;
use radar_core::eval::{ablation_suite, bench_radial, bench_raster, correction_probe, BenchReport, BenchRow};
use radar_core::grid::{
    make_schedule, preset_schedule, Anchor, Extent, Growth, RingSchedule, SequenceLayout, TokenGrid,
};
use radar_core::infer::{
    constrained_decode, decode, extrapolate_schedule, known_outside, CorrectionMode, DecodeState, SamplerConfig,
    StepAttention,
};
use radar_core::mask::{check_mask, AttentionMask, MaskKind, NestedMask};
use radar_core::model::{Model, ModelConfig};
use radar_core::par::{self, Exec};
use radar_core::tokenizer::{procedural_image, vq_decode, vq_train, ToyImage, VqConfig};
use radar_core::train::{SourceKind, SyntheticSource, TrainConfig, Trainer};

use crate::render::render_palette;
use crate::{
    Attention, BenchArgs, Command, EditArgs, Failure, GenArgs, MaskArgs, MaskMode, OutpaintArgs, Preset, RenderArgs,
    RenderMode, SampleArgs, ScheduleArgs, Suite, TokenizerTrainArgs, TrainArgs,
};

type Res<T = ()> = Result<T, Failure>;

pub fn run(cmd: Command) -> Res {
    match cmd {
        Command::Train(a) => train(a),
        Command::Gen(a) => gen(a),
        Command::Outpaint(a) => outpaint(a),
        Command::Edit(a) => edit(a),
        Command::Bench(a) => bench(a),
        Command::Mask(a) => mask(a),
        Command::Schedule(a) => schedule(a),
        Command::TokenizerTrain(a) => tokenizer_train(a),
        Command::Render(a) => render(a),
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn write_file(path: &Path, text: &str) -> Res {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn read_file(path: &Path) -> Res<String> {
    fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn load(path: &Path) -> Res<Container> {
    Container::load(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// A schedule file when `spec` names an existing file, else a preset.
fn resolve_schedule(spec: &str, h: usize, w: usize) -> Res<RingSchedule> {
    let p = Path::new(spec);
    if p.is_file() {
        return Ok(RingSchedule::from_text(&read_file(p)?)?);
    }
    Ok(preset_schedule(spec, h, w)?)
}

/// Parses `r0,c0,r1,c1` into a half-open rectangle.
fn parse_rect(s: &str) -> Res<Extent> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| usage(format!("bad rectangle {s:?}: expected r0,c0,r1,c1"))))
        .collect::<Res<_>>()?;
    let [r0, c0, r1, c1] = v[..] else {
        return Err(usage(format!("bad rectangle {s:?}: expected r0,c0,r1,c1")));
    };
    Extent::new(r0, c0, r1, c1).map_err(|e| usage(e.to_string()))
}

fn train(a: TrainArgs) -> Res {
    let base = match a.preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Full => TrainConfig::default(),
    };
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::parse(&read_file(p)?, base).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => base,
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(g) = a.grids_per_epoch {
        cfg.grids_per_epoch = g;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let (h, w) = cfg.model.max_grid;
    let tokenizer = match &a.tokenizer {
        Some(p) => Some(Arc::new(
            load(p)?.tokenizer()?.ok_or_else(|| Failure::Runtime(format!("{} has no tokenizer", p.display())))?,
        )),
        None => None,
    };
    let src = match &tokenizer {
        Some(t) => {
            cfg.source = SourceKind::VqProcedural;
            cfg.model.vocab_size = t.vocab_size;
            SyntheticSource::with_tokenizer(t.clone(), cfg.model.num_classes, h, w)?
        }
        None => SyntheticSource::new(cfg.source, cfg.model.vocab_size, cfg.model.num_classes, h, w)?,
    };
    let mut tr = Trainer::new(cfg.clone(), src, Exec::best())?;
    let mut log = String::from(radar_core::train::EpochMetrics::TSV_HEADER);
    log.push('\n');
    tr.run(|m| {
        eprintln!("epoch {} loss {:.4} border {:.4}", m.epoch, m.loss, m.border_loss);
        log.push_str(&m.tsv());
        log.push('\n');
    })?;
    if let Some(p) = &a.log {
        write_file(p, &log)?;
    }
    let mut c = Container::default();
    c.put_model(&tr.model);
    c.put_schedule(&tr.schedule);
    c.set("train.source", cfg.source);
    c.set("train.mask", if cfg.mask == MaskKind::Nested { "nested" } else { "block_causal" });
    c.set("train.seed", cfg.seed);
    c.set("train.epochs", cfg.epochs);
    if let Some(t) = &tokenizer {
        c.put_tokenizer(t);
    }
    c.save(&a.out)?;
    Ok(())
}

fn sampler_of(a: &SampleArgs) -> Res<SamplerConfig> {
    let correction = match a.correction.as_str() {
        "off" => CorrectionMode::Off,
        "greedy" => CorrectionMode::Greedy,
        t => CorrectionMode::Thresholded(
            t.parse().map_err(|_| usage(format!("--correction expects off, greedy or a number, got {t:?}")))?,
        ),
    };
    Ok(SamplerConfig {
        temperature: a.temperature,
        top_k: a.top_k,
        cfg_scale: a.cfg_scale,
        correction,
        attention: match a.attention {
            Attention::Unrestricted => StepAttention::Unrestricted,
            Attention::Nested => StepAttention::Nested,
        },
        seed: a.seed,
    })
}

/// Model, its schedule (explicit or stored) and the sampler for a sampling command.
fn sampling_setup(a: &SampleArgs) -> Res<(Model<f32>, RingSchedule, SamplerConfig)> {
    let c = load(&a.ckpt)?;
    let model = c.model()?;
    let (h, w) = model.cfg.max_grid;
    let schedule = match &a.schedule {
        Some(spec) => resolve_schedule(spec, h, w)?,
        None => match c.schedule()? {
            Some(s) => s,
            None => preset_schedule("center", h, w)?,
        },
    };
    if a.class > model.cfg.num_classes {
        return Err(usage(format!("--class {} outside 0..={}", a.class, model.cfg.num_classes)));
    }
    Ok((model, schedule, sampler_of(a)?))
}

fn write_outputs(a: &SampleArgs, grid: &TokenGrid, st: &DecodeState) -> Res {
    write_file(&a.out, &grid.to_text())?;
    if let Some(p) = &a.log_revisions {
        let text: String = st.revision_log.iter().map(|r| r.tsv() + "\n").collect();
        write_file(p, &text)?;
    }
    if let Some(p) = &a.render {
        render_palette(grid, 8)?.write(p)?;
    }
    Ok(())
}

fn gen(a: GenArgs) -> Res {
    let (model, schedule, sampler) = sampling_setup(&a.sample)?;
    let schedule = match &a.size {
        Some(v) => extrapolate_schedule(&schedule, v[0], v[1]).map_err(|e| usage(e.to_string()))?,
        None => schedule,
    };
    let (grid, st) = decode(&model, a.sample.class, &schedule, &sampler)?;
    write_outputs(&a.sample, &grid, &st)
}

fn read_base(path: &Path, model: &Model<f32>, schedule: &RingSchedule) -> Res<TokenGrid> {
    let g = TokenGrid::from_text(&read_file(path)?, model.cfg.vocab_size)?;
    if (g.height(), g.width()) != (schedule.grid_height(), schedule.grid_width()) {
        return Err(Failure::Runtime(format!(
            "base grid is {}x{}, schedule covers {}x{}",
            g.height(),
            g.width(),
            schedule.grid_height(),
            schedule.grid_width()
        )));
    }
    Ok(g)
}

fn outpaint(a: OutpaintArgs) -> Res {
    let (model, schedule, sampler) = sampling_setup(&a.sample)?;
    let base = read_base(&a.base, &model, &schedule)?;
    let keep = parse_rect(&a.keep)?;
    if !keep.fits(base.height(), base.width()) {
        return Err(usage(format!("--keep {keep} outside the grid")));
    }
    let known: HashMap<(usize, usize), u32> = keep.positions().map(|(r, c)| ((r, c), base.get(r, c))).collect();
    let (grid, st) = constrained_decode(&model, a.sample.class, &schedule, &known, &sampler)?;
    write_outputs(&a.sample, &grid, &st)
}

fn edit(a: EditArgs) -> Res {
    let (model, schedule, sampler) = sampling_setup(&a.sample)?;
    let base = read_base(&a.base, &model, &schedule)?;
    let regions: Vec<Extent> = a.region.iter().map(|s| parse_rect(s)).collect::<Res<_>>()?;
    if let Some(e) = regions.iter().find(|e| !e.fits(base.height(), base.width())) {
        return Err(usage(format!("--region {e} outside the grid")));
    }
    let known = known_outside(&base, &regions);
    let (grid, st) = constrained_decode(&model, a.sample.class, &schedule, &known, &sampler)?;
    write_outputs(&a.sample, &grid, &st)
}

fn bench(a: BenchArgs) -> Res {
    fs::create_dir_all(&a.out)?;
    match a.suite {
        Suite::Speed => bench_speed(&a),
        Suite::Correction => bench_correction(&a),
        Suite::Ablate => bench_ablate(&a),
    }
}

fn bench_model(a: &BenchArgs) -> Res<(Model<f32>, Option<Container>)> {
    match &a.ckpt {
        Some(p) => {
            let c = load(p)?;
            Ok((c.model()?, Some(c)))
        }
        None => {
            let (h, w) = (a.grid[0], a.grid[1]);
            let cfg = ModelConfig { max_grid: (h, w), max_steps: h.max(w), ..ModelConfig::default() };
            Ok((Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(a.seed))?, None))
        }
    }
}

fn bench_speed(a: &BenchArgs) -> Res {
    let (model, _) = bench_model(a)?;
    let (h, w) = model.cfg.max_grid;
    let sampler = SamplerConfig { seed: a.seed, ..SamplerConfig::default() };
    let mut rep = BenchReport::default();
    for name in ["center", "center13"] {
        let s = preset_schedule(name, h, w)?;
        rep.rows.push(bench_radial(&model, name, &s, &sampler, a.warmup, a.runs)?);
    }
    rep.rows.push(bench_raster(&model, h, w, &sampler, a.warmup, a.runs)?);
    rep.note("suite", "speed");
    rep.note("grid", format!("{h} {w}"));
    rep.note("runs", a.runs);
    rep.note("warmup", a.warmup);
    rep.note("seed", a.seed);
    rep.note("ckpt", a.ckpt.as_ref().map_or("none".into(), |p| p.display().to_string()));
    rep.note("threads", 1);
    let raster = rep.rows.last().unwrap().wallclock_s;
    let ratios: Vec<(String, f64)> = rep.rows[..2].iter().map(|r| (r.method.clone(), raster / r.wallclock_s)).collect();
    for (m, x) in ratios {
        rep.note(&format!("speedup.{m}"), format!("{x:.4}"));
    }
    finish(a, "speed", &rep)
}

fn bench_correction(a: &BenchArgs) -> Res {
    let (model, c) = bench_model(a)?;
    let (h, w) = model.cfg.max_grid;
    let schedule = c.as_ref().map(|c| c.schedule()).transpose()?.flatten().unwrap_or(preset_schedule("center", h, w)?);
    let kind: SourceKind = a.source.parse().map_err(|e: radar_core::error::Error| usage(e.to_string()))?;
    let src = SyntheticSource::new(kind, model.cfg.vocab_size, model.cfg.num_classes, h, w)?;
    let mut rep = BenchReport::default();
    for (name, mode) in [
        ("greedy", CorrectionMode::Greedy),
        ("thresholded_0.9", CorrectionMode::Thresholded(0.9)),
        ("off", CorrectionMode::Off),
    ] {
        let p = correction_probe(
            &model,
            &src,
            &schedule,
            mode,
            StepAttention::Unrestricted,
            a.trials,
            a.seed,
            Exec::best(),
        )?;
        let mut row = BenchRow::new(name, model.params.num_params());
        row.steps = schedule.len();
        row.revision_rate = Some(p.stats.revision_rate);
        row.revision_benefit = Some(p.stats.revision_benefit);
        rep.rows.push(row);
        rep.note(&format!("recovery.{name}"), format!("{:.4}", p.recovery));
        rep.note("chance", format!("{:.4}", p.chance));
    }
    rep.note("suite", "correction");
    rep.note("source", kind);
    rep.note("trials", a.trials);
    rep.note("seed", a.seed);
    finish(a, "correction", &rep)
}

fn bench_ablate(a: &BenchArgs) -> Res {
    let mut base = TrainConfig::desk();
    if let Some(e) = a.epochs {
        base.epochs = e;
    }
    let (h, w) = base.model.max_grid;
    let src = SyntheticSource::new(base.source, base.model.vocab_size, base.model.num_classes, h, w)?;
    let seeds: Vec<u64> = (0..a.seeds).map(|s| s + a.seed).collect();
    let (rows, verdict) = ablation_suite(&base, &src, &seeds, a.eval_grids, Exec::best())?;
    let mut tsv = String::from("variant\tseed\theldout_nll\tborder_nll\tfinal_loss\n");
    for r in &rows {
        let _ = writeln!(tsv, "{}\t{}\t{:.6}\t{:.6}\t{:.6}", r.name, r.seed, r.nll.nll, r.nll.border_nll, r.final_loss);
    }
    let mut rep = BenchReport::default();
    rep.note("suite", "ablate");
    rep.note("epochs", base.epochs);
    rep.note("seeds", format!("{seeds:?}"));
    rep.note("eval_grids", a.eval_grids);
    rep.note("nam_helps", verdict.nam_helps);
    rep.note("anchor_order_votes", format!("{}/{}", verdict.anchor_order_votes.0, verdict.anchor_order_votes.1));
    write_file(&a.out.join("ablate.tsv"), &tsv)?;
    write_file(&a.out.join("ablate.manifest"), &rep.manifest_text())?;
    print!("{tsv}");
    Ok(())
}

fn finish(a: &BenchArgs, name: &str, rep: &BenchReport) -> Res {
    let tsv = rep.to_tsv();
    write_file(&a.out.join(format!("{name}.tsv")), &tsv)?;
    write_file(&a.out.join(format!("{name}.manifest")), &rep.manifest_text())?;
    print!("{tsv}");
    Ok(())
}

fn mask(a: MaskArgs) -> Res {
    let s = resolve_schedule(&a.schedule, a.grid[0], a.grid[1])?;
    let layout = SequenceLayout::from_schedule(&s);
    let kind = match a.kind {
        MaskMode::Nested => MaskKind::Nested,
        MaskMode::BlockCausal => MaskKind::BlockCausal,
    };
    let m = NestedMask::build(&layout, 1, kind);
    if a.dump {
        print!("{}", m.dump());
    } else {
        let n = m.len();
        let allowed = (0..n).flat_map(|q| (0..n).map(move |v| (q, v))).filter(|&(q, v)| m.allowed(q, v)).count();
        println!("positions {n}\nallowed {allowed}\ncheck {:?}", check_mask(&m));
    }
    Ok(())
}

fn schedule(a: ScheduleArgs) -> Res {
    let (h, w) = (a.grid[0], a.grid[1]);
    let s = match &a.preset {
        Some(p) => preset_schedule(p, h, w).map_err(|e| usage(e.to_string()))?,
        None => {
            let anchor: Anchor = a.anchor.as_deref().unwrap_or("center").parse().map_err(|e| usage(format!("{e}")))?;
            let growth = if a.balanced { Growth::Balanced(a.thickness) } else { Growth::Uniform(a.thickness) };
            make_schedule(h, w, anchor, &growth).map_err(|e| usage(e.to_string()))?
        }
    };
    match &a.out {
        Some(p) => write_file(p, &s.to_text()),
        None => {
            print!("{}", s.to_text());
            Ok(())
        }
    }
}

fn tokenizer_train(a: TokenizerTrainArgs) -> Res {
    let images: Vec<ToyImage> = if a.images.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        (0..a.count).map(|i| procedural_image(i % 4, 4, a.size, a.size, &mut rng)).collect()
    } else {
        par::map(Exec::best(), &a.images, |p| ToyImage::read(p)).into_iter().collect::<Result<_, _>>()?
    };
    let channels = images.first().map_or(3, |i| i.channels);
    let cfg = VqConfig {
        vocab_size: a.vocab,
        patch_size: a.patch,
        channels,
        epochs: a.epochs,
        seed: a.seed,
        ..VqConfig::default()
    };
    let (tok, metrics) = vq_train(&images, &cfg)?;
    for (i, m) in metrics.iter().enumerate() {
        eprintln!("epoch {} loss {:.5} usage {:.3}", i + 1, m.loss, m.usage);
    }
    let mut c = Container::default();
    c.put_tokenizer(&tok);
    c.save(&a.out)?;
    Ok(())
}

fn render(a: RenderArgs) -> Res {
    let text = read_file(&a.grid)?;
    let img = match a.mode {
        RenderMode::Palette => {
            let g = TokenGrid::from_text(&text, crate::render::PALETTE_SIZE)?;
            render_palette(&g, a.scale)?
        }
        RenderMode::VqDecode => {
            let p = a.tokenizer.as_ref().ok_or_else(|| usage("--mode vq-decode needs --tokenizer"))?;
            let tok =
                load(p)?.tokenizer()?.ok_or_else(|| Failure::Runtime(format!("{} has no tokenizer", p.display())))?;
            vq_decode(&TokenGrid::from_text(&text, tok.vocab_size)?, &tok)?
        }
    };
    img.write(&a.out)?;
    Ok(())
}
