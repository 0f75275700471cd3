use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use radar_core::checkpoint::Container;
use radar_core::grid::preset_schedule;
use radar_core::par::Exec;
use radar_core::tokenizer::{procedural_image, vq_decode, vq_encode, vq_train, ToyImage, VqConfig};
use radar_core::train::{toy_tpt_finetune, SourceKind, SyntheticSource, TrainConfig, Trainer};

fn images(n: usize, seed: u64) -> Vec<ToyImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| procedural_image(i % 4, 4, 32, 32, &mut rng)).collect()
}

fn trained() -> (radar_core::tokenizer::VqTokenizer, Vec<radar_core::tokenizer::VqEpoch>) {
    let cfg = VqConfig { epochs: 12, ..VqConfig::default() };
    vq_train(&images(64, 1), &cfg).unwrap()
}

#[test]
fn training_reaches_usage_psnr_and_distinct_codes() {
    let (tok, metrics) = trained();
    for w in metrics[..5].windows(2) {
        assert!(w[1].loss <= w[0].loss * 1.02, "loss rose: {metrics:?}");
    }
    let last = metrics.last().unwrap();
    assert!(last.usage > 0.5, "usage {}", last.usage);
    assert!(tok.codes_distinct());
    assert_eq!(tok.decoder_rank(), tok.latent_dim);

    let held = images(16, 99);
    let mean_psnr: f64 = held
        .iter()
        .map(|img| img.psnr(&vq_decode(&vq_encode(img, &tok).unwrap(), &tok).unwrap()).unwrap())
        .sum::<f64>()
        / held.len() as f64;
    assert!(mean_psnr > 20.0, "held-out psnr {mean_psnr}");
}

#[test]
fn grid_dims_follow_patch_size() {
    let (tok, _) = trained();
    let img = &images(1, 5)[0];
    let g = vq_encode(img, &tok).unwrap();
    assert_eq!((g.height(), g.width()), (32 / tok.patch_size, 32 / tok.patch_size));
}

#[test]
fn decoded_codes_re_encode_to_themselves() {
    let (tok, _) = trained();
    let g = vq_encode(&images(1, 7)[0], &tok).unwrap();
    let img = vq_decode(&g, &tok).unwrap();
    // Clamping to [0, 1] can move a decoded patch off its code, so only
    // most codes need to be fixed points.
    let again = vq_encode(&img, &tok).unwrap();
    let agree = g.cells().iter().zip(again.cells()).filter(|(a, b)| a == b).count();
    assert!(agree as f64 >= 0.9 * g.cells().len() as f64, "{agree}/{}", g.cells().len());
}

#[test]
fn single_patch_is_reconstructed_almost_exactly() {
    let img = ToyImage::filled(16, 16, 3, 0.37).unwrap();
    let cfg = VqConfig { vocab_size: 8, epochs: 60, batch_size: 1, ..VqConfig::default() };
    let (_, metrics) = vq_train(&[img], &cfg).unwrap();
    let mse = metrics.last().unwrap().recon_mse;
    assert!(mse < 1e-4, "recon mse {mse}");
}

#[test]
fn ppm_and_pgm_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = &images(1, 3)[0];
    let p = dir.path().join("a.ppm");
    img.write(&p).unwrap();
    let back = ToyImage::read(&p).unwrap();
    assert_eq!((back.height, back.width, back.channels), (32, 32, 3));
    assert!(img.mse(&back).unwrap() < 1e-5);

    let gray = ToyImage::new(4, 4, 1, (0..16).map(|i| i as f32 / 15.0).collect()).unwrap();
    let q = dir.path().join("g.pgm");
    gray.write(&q).unwrap();
    let back = ToyImage::read(&q).unwrap();
    assert_eq!(back.channels, 1);
    assert!(gray.mse(&back).unwrap() < 1e-5);
}

#[test]
fn tokenizer_survives_checkpoint() {
    let (tok, _) = trained();
    let mut c = Container::default();
    c.put_tokenizer(&tok);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.radr");
    c.save(&p).unwrap();
    let back = Container::load(&p).unwrap().tokenizer().unwrap().unwrap();
    assert_eq!(back, tok);
}

#[test]
fn post_training_improves_generated_code_reconstruction() {
    let (tok, _) = trained();
    let tok = Arc::new(tok);
    let src = SyntheticSource::with_tokenizer(tok.clone(), 4, 8, 8).unwrap();
    let mut cfg = TrainConfig::desk();
    cfg.model.vocab_size = tok.vocab_size;
    cfg.source = SourceKind::VqProcedural;
    cfg.epochs = 4;
    let mut tr = Trainer::new(cfg, src.clone(), Exec::Sequential).unwrap();
    tr.run(|_| {}).unwrap();
    let schedule = preset_schedule("center", 8, 8).unwrap();
    let (_, report) = toy_tpt_finetune(&tok, &tr.model, &src, &schedule, 0.05, 20, 64, 3).unwrap();
    assert!(report.generated_mse.1 < report.generated_mse.0, "{report:?}");
    assert!(report.gt_mse.1 <= report.gt_mse.0 * 1.1, "{report:?}");
    // Pure generator codes still run and move the decoder toward them.
    let (_, all_gen) = toy_tpt_finetune(&tok, &tr.model, &src, &schedule, 1.0, 2, 16, 3).unwrap();
    assert!(all_gen.generated_mse.1 < all_gen.generated_mse.0, "{all_gen:?}");
    assert!(toy_tpt_finetune(&tok, &tr.model, &src, &schedule, 1.5, 1, 4, 3).is_err());
}
