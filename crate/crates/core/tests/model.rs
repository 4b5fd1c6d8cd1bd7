use std::path::Path;

use sacn::config::{Mode, RunConfig};
use sacn::model::SacnModel;
use sacn::train::Checkpoint;
use sacn::{Rng, Tensor};

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn random_batch(rng: &mut Rng, b: usize, c: &RunConfig) -> Tensor<f32> {
    let m = &c.model;
    let n = b * m.in_channels * m.height * m.width;
    Tensor::new(&[b, m.in_channels, m.height, m.width], (0..n).map(|_| rng.uniform() as f32).collect()).unwrap()
}

#[test]
fn fixed_weights_match_golden_vector() {
    let ckpt = Checkpoint::load(&fixture("golden/model.ckpt")).unwrap();
    let model = ckpt.model::<f64>().unwrap();
    assert_eq!(model.config.routing_iters, 3);
    let input = std::fs::read_to_string(fixture("golden/input.txt")).unwrap();
    let rows: Vec<Vec<f64>> = input
        .lines()
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect();
    let flat: Vec<f64> = rows.concat();
    let x = Tensor::<f64>::new(&[rows.len(), 1, 8, 8], flat).unwrap();
    let out = model.forward(&x, &ckpt.config.loss).unwrap();

    let golden = std::fs::read_to_string(fixture("golden/golden.txt")).unwrap();
    let mut lines = golden.lines();
    for b in 0..rows.len() {
        let nums = |line: &str, tag: &str| -> Vec<f64> {
            let rest = line.strip_prefix(tag).unwrap();
            rest.split_whitespace().map(|v| v.parse().unwrap()).collect()
        };
        let lengths = nums(lines.next().unwrap(), "lengths ");
        let class: usize = lines.next().unwrap().strip_prefix("class ").unwrap().parse().unwrap();
        let recon = nums(lines.next().unwrap(), "recon ");
        for (j, want) in lengths.iter().enumerate() {
            assert!((out.probabilities.get(&[b, j]) - want).abs() < 1e-12, "sample {b} class {j}");
        }
        assert_eq!(out.predictions[b], class);
        for (k, want) in recon.iter().enumerate() {
            assert!((out.reconstructions.get(&[b, k]) - want).abs() < 1e-12, "sample {b} pixel {k}");
        }
    }
}

#[test]
fn sacn_at_init_equals_baseline() {
    let mut c = RunConfig::preset("synthetic-complex").unwrap();
    c.seed = 5;
    let sacn = SacnModel::<f32>::new(&c).unwrap();
    c.model.mode = Mode::Baseline;
    let base = SacnModel::<f32>::new(&c).unwrap();
    let mut rng = Rng::new(1);
    for _ in 0..5 {
        let x = random_batch(&mut rng, 4, &c);
        let a = sacn.forward(&x, &c.loss).unwrap();
        let b = base.forward(&x, &c.loss).unwrap();
        assert_eq!(a.probabilities, b.probabilities);
        assert_eq!(a.reconstructions, b.reconstructions);
        assert!(a.attention.is_some() && b.attention.is_none());
    }
}

#[test]
fn single_sample_matches_batch_row() {
    let c = RunConfig::preset("synthetic-simple").unwrap();
    let mut model = SacnModel::<f32>::new(&c).unwrap();
    model.attention.as_mut().unwrap().alpha.data_mut()[0] = 0.7;
    let x = random_batch(&mut Rng::new(8), 8, &c);
    let full = model.forward(&x, &c.loss).unwrap();
    let per = x.len() / 8;
    for b in 0..8 {
        let one = Tensor::new(&[1, 1, 16, 16], x.data()[b * per..(b + 1) * per].to_vec()).unwrap();
        let o = model.forward(&one, &c.loss).unwrap();
        for j in 0..2 {
            assert!((o.probabilities.get(&[0, j]) - full.probabilities.get(&[b, j])).abs() < 1e-6);
        }
        for k in 0..256 {
            assert!((o.reconstructions.get(&[0, k]) - full.reconstructions.get(&[b, k])).abs() < 1e-6);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let c = RunConfig::preset("mini").unwrap();
    let m1 = SacnModel::<f64>::new(&c).unwrap();
    let m2 = SacnModel::<f64>::new(&c).unwrap();
    assert_eq!(m1, m2);
    let x = random_batch(&mut Rng::new(2), 3, &c).cast::<f64>();
    assert_eq!(m1.forward(&x, &c.loss).unwrap(), m2.forward(&x, &c.loss).unwrap());
}

fn conv_params(cout: usize, cin: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

#[test]
fn census_of_default_config() {
    let c = RunConfig::default();
    let sacn = SacnModel::<f32>::new(&c).unwrap();
    let (rows, total) = sacn.parameter_census();
    assert_eq!(total, rows.iter().map(|r| r.count).sum::<usize>());

    // 16×16 input, 5×5 conv → 12×12; 6×6 stride-2 primary conv → 4×4.
    let feature = conv_params(64, 1, 5);
    let attention = 8 * 64 + 8 * 64 + 64 * 64 + 1;
    let primary = conv_params(64, 64, 6);
    let transform = (8 * 4 * 4) * 2 * 16 * 8;
    let decoder = (32 * 512 + 512) + (512 * 1024 + 1024) + (1024 * 256 + 256);
    assert_eq!(total, feature + attention + primary + transform + decoder);
    assert_eq!(total, 991_681);

    let mut cb = c.clone();
    cb.model.mode = Mode::Baseline;
    let base = SacnModel::<f32>::new(&cb).unwrap();
    let (brows, btotal) = base.parameter_census();
    let attn_rows: usize = rows.iter().filter(|r| r.name.starts_with("attention.")).map(|r| r.count).sum();
    assert_eq!(total - btotal, attn_rows);
    assert_eq!(total - btotal, 8 * 64 + 8 * 64 + 64 * 64 + 1);
    let shared: Vec<_> = rows.iter().filter(|r| !r.name.starts_with("attention.")).collect();
    assert_eq!(shared.len(), brows.len());
    for (a, b) in shared.iter().zip(&brows) {
        assert_eq!((a.name, &a.shape), (b.name, &b.shape));
    }
    assert_eq!(SacnModel::<f32>::new(&c).unwrap().parameter_census().1, total);
}
