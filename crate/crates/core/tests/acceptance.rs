//! End-to-end acceptance suite. Each test prints one `criterion N: PASS|FAIL`
//! line and fails when its criterion does not hold.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use v2netcls::metrics::{median_iqr, roc_auc, roc_auc_pairwise};
use v2netcls::networks::*;
use v2netcls::phantom::*;
use v2netcls::pipeline::*;
use v2netcls::tensor::*;
use v2netcls::volume_io::{read_nifti, write_nifti, Volume};
use v2netcls::Scalar;

/// The learnability runs share one core; holding this keeps wall-clock
/// timings meaningful.
static HEAVY: Mutex<()> = Mutex::new(());

fn heavy() -> MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} {name} [{detail}]", if pass { "PASS" } else { "FAIL" });
    // Written to the real stdout so the line shows even when output is captured.
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
    assert!(pass, "{line}");
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<T> {
    (0..n).map(|_| T::from_f64_lossy(rng.gen_range(lo..hi))).collect()
}

fn tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_vec(shape, uniform(rng, shape.iter().product(), lo, hi)).unwrap()
}

fn small_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(2..=3), rng.gen_range(1..=3), rng.gen_range(2..=3)]
}

// ---------------------------------------------------------------- criterion 1

type Case<T> = (Vec<Tensor<T>>, Box<dyn Fn(&[Tensor<T>]) -> Result<Tensor<T>, TensorError>>);

/// Five seeded random instances per differentiable op, excluding convolutions.
fn pointwise_cases<T: Scalar + 'static>(seed: u64) -> Vec<(&'static str, Case<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(&'static str, Case<T>)> = Vec::new();
    let s = small_shape(&mut rng);
    let a = tensor::<T>(&mut rng, &s, -1.0, 1.0);
    let b = tensor::<T>(&mut rng, &s, -1.0, 1.0);
    cases.push(("add", (vec![a.clone(), b.clone()], Box::new(|t| add(&t[0], &t[1])))));
    cases.push(("add_residual", (vec![a.clone(), b.clone()], Box::new(|t| add_residual(&t[0], &t[1])))));
    cases.push(("mul", (vec![a.clone(), b.clone()], Box::new(|t| mul(&t[0], &t[1])))));
    let k: f64 = rng.gen_range(-2.0..2.0);
    cases.push(("scale", (vec![a.clone()], Box::new(move |t| scale(&t[0], k)))));
    cases.push(("sum", (vec![a.clone()], Box::new(|t| sum(&t[0])))));
    cases.push(("mean", (vec![a.clone()], Box::new(|t| mean(&t[0])))));
    cases.push(("sigmoid", (vec![tensor(&mut rng, &s, -4.0, 4.0)], Box::new(|t| sigmoid(&t[0])))));
    let rows = rng.gen_range(1..=4);
    let cols = rng.gen_range(2..=6);
    cases.push(("softmax", (vec![tensor(&mut rng, &[rows, cols], -3.0, 3.0)], Box::new(|t| softmax(&t[0])))));

    // Keep PReLU inputs away from the kink.
    let c = s[1];
    let x: Vec<T> = uniform::<T>(&mut rng, s.iter().product(), 0.1, 1.5)
        .into_iter()
        .map(|v| if rng.gen_bool(0.5) { -v } else { v })
        .collect();
    let slopes = tensor::<T>(&mut rng, &[c], -0.5, 0.5);
    cases.push(("prelu", (vec![Tensor::from_vec(&s, x).unwrap(), slopes], Box::new(|t| prelu(&t[0], &t[1])))));

    let gamma = tensor::<T>(&mut rng, &[c], 0.5, 1.5);
    let beta = tensor::<T>(&mut rng, &[c], -0.5, 0.5);
    let xn = tensor::<T>(&mut rng, &s, -2.0, 2.0);
    cases.push(("instance_norm", (vec![xn, gamma, beta], Box::new(|t| instance_norm(&t[0], &t[1], &t[2])))));

    let (n, fin, fout) = (rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=4));
    let lin = vec![
        tensor::<T>(&mut rng, &[n, fin], -1.0, 1.0),
        tensor::<T>(&mut rng, &[fout, fin], -1.0, 1.0),
        tensor::<T>(&mut rng, &[fout], -1.0, 1.0),
    ];
    cases.push(("linear", (lin, Box::new(|t| linear(&t[0], &t[1], &t[2])))));

    let mut s2 = s.clone();
    s2[1] = rng.gen_range(1..=2);
    let cat = vec![a.clone(), tensor::<T>(&mut rng, &s2, -1.0, 1.0)];
    cases.push(("concat_channels", (cat, Box::new(|t| concat_channels(&[t[0].clone(), t[1].clone()])))));
    cases.push(("global_avg_pool", (vec![a.clone()], Box::new(|t| global_avg_pool(&t[0])))));
    let flat = s.iter().product::<usize>();
    cases.push(("reshape", (vec![a.clone()], Box::new(move |t| mul(&t[0].reshape(&[flat])?, &t[0].reshape(&[flat])?)))));

    let p = tensor::<T>(&mut rng, &s, 0.05, 0.95);
    let g: Vec<T> = (0..flat).map(|_| T::from_f64_lossy(rng.gen_range(0..2) as f64)).collect();
    let g = Tensor::from_vec(&s, g).unwrap();
    cases.push(("soft_dice_loss", (vec![p, g], Box::new(|t| soft_dice_loss(&t[0], &t[1])))));

    let n = rng.gen_range(1..=6);
    let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    let (wp, wn) = (rng.gen_range(0.5..5.0), rng.gen_range(0.5..2.0));
    cases.push((
        "weighted_bce",
        (vec![tensor(&mut rng, &[n, 1], -3.0, 3.0)], Box::new(move |t| weighted_bce(&t[0], &labels, wp, wn))),
    ));
    let k = rng.gen_range(2..=5);
    let cls: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    cases.push((
        "softmax_cross_entropy",
        (vec![tensor(&mut rng, &[n, k], -3.0, 3.0)], Box::new(move |t| softmax_cross_entropy(&t[0], &cls))),
    ));
    cases
}

fn conv_cases(seed: u64) -> Vec<(&'static str, Case<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(&'static str, Case<f32>)> = Vec::new();
    let (n, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let k = [rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3)];
    let stride = [rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=2)];
    let pad = k.map(|k| rng.gen_range(0..=k / 2));
    let dims = [rng.gen_range(3..=5), rng.gen_range(3..=5), rng.gen_range(2..=4)];
    let x = tensor::<f32>(&mut rng, &[n, cin, dims[0], dims[1], dims[2]], 0.2, 1.0);
    let w = tensor::<f32>(&mut rng, &[cout, cin, k[0], k[1], k[2]], 0.2, 1.0);
    let b = tensor::<f32>(&mut rng, &[cout], 0.2, 1.0);
    cases.push(("conv3d", (vec![x, w, b], Box::new(move |t| conv3d(&t[0], &t[1], &t[2], stride, pad)))));

    let tdims = [rng.gen_range(2..=3), rng.gen_range(2..=3), rng.gen_range(1..=3)];
    let x = tensor::<f32>(&mut rng, &[n, cin, tdims[0], tdims[1], tdims[2]], 0.2, 1.0);
    let w = tensor::<f32>(&mut rng, &[cin, cout, k[0].max(stride[0]), k[1].max(stride[1]), k[2].max(stride[2])], 0.2, 1.0);
    let b = tensor::<f32>(&mut rng, &[cout], 0.2, 1.0);
    cases.push((
        "conv3d_transpose",
        (vec![x, w, b], Box::new(move |t| conv3d_transpose(&t[0], &t[1], &t[2], stride, [0; 3]))),
    ));

    let ddims = [stride[0] * rng.gen_range(1..=3), stride[1] * rng.gen_range(1..=3), stride[2] * rng.gen_range(1..=2)];
    let x = tensor::<f32>(&mut rng, &[n, cin, ddims[0], ddims[1], ddims[2]], 0.2, 1.0);
    let w = tensor::<f32>(&mut rng, &[cout, cin, stride[0], stride[1], stride[2]], 0.2, 1.0);
    let b = tensor::<f32>(&mut rng, &[cout], 0.2, 1.0);
    cases.push(("downsample_conv", (vec![x, w, b], Box::new(move |t| downsample_conv(&t[0], &t[1], &t[2], stride)))));
    cases
}

#[test]
fn criterion_01_gradient_suite() {
    let _g = heavy();
    let start = Instant::now();
    let mut worst_conv = (0.0f64, "");
    let mut worst_other = (0.0f64, "");
    let mut checked = std::collections::BTreeMap::<&str, usize>::new();
    for seed in 0..5 {
        for (name, (inputs, op)) in conv_cases(seed) {
            let err = grad_check(|t| op(t), &inputs, 1e-2).unwrap();
            *checked.entry(name).or_default() += 1;
            if err > worst_conv.0 {
                worst_conv = (err, name);
            }
        }
        for (name, (inputs, op)) in pointwise_cases::<f64>(100 + seed) {
            let err = grad_check(|t| op(t), &inputs, 1e-6).unwrap();
            *checked.entry(name).or_default() += 1;
            if err > worst_other.0 {
                worst_other = (err, name);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ops = checked.len();
    let min_instances = checked.values().min().copied().unwrap_or(0);
    let pass = worst_conv.0 < 1e-2 && worst_other.0 < 1e-3 && min_instances >= 5 && secs < 120.0;
    report(
        1,
        "gradient checks",
        pass,
        &format!(
            "{ops} ops x {min_instances} shapes; conv (f32) max rel err {:.2e} ({}) < 1e-2; pointwise/linear/norm (f64) max rel err {:.2e} ({}) < 1e-3; {secs:.1} s < 120 s",
            worst_conv.0, worst_conv.1, worst_other.0, worst_other.1
        ),
    );
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_02_loss_identities() {
    let g = vec![0.0f32, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    let gt = Tensor::from_vec(&[1, 1, 2, 2, 2], g.clone()).unwrap();
    let same = soft_dice_loss(&gt, &gt).unwrap().item() as f64;
    let inv = Tensor::from_vec(&[1, 1, 2, 2, 2], g.iter().map(|v| 1.0 - v).collect()).unwrap();
    let disjoint = soft_dice_loss(&inv, &gt).unwrap().item() as f64;
    let half = Tensor::from_vec(&[1, 1, 2, 2, 2], vec![0.5f32; 8]).unwrap();
    let g4 = Tensor::from_vec(&[1, 1, 2, 2, 2], vec![1.0f32, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let third = soft_dice_loss(&half, &g4).unwrap().item() as f64;
    let z = Tensor::<f32>::from_vec(&[1, 1], vec![0.0]).unwrap();
    let bce = weighted_bce(&z, &[1], 1.0, 1.0).unwrap().item() as f64;
    let bce_other_neg = weighted_bce(&z, &[1], 1.0, 7.5).unwrap().item() as f64;
    let ln2 = std::f64::consts::LN_2;
    let pass = same < 1e-4
        && disjoint > 1.0 - 1e-4
        && (third - 1.0 / 3.0).abs() <= 1e-5
        && (bce - ln2).abs() <= 1e-6
        && (bce_other_neg - ln2).abs() <= 1e-6;
    report(
        2,
        "loss identities",
        pass,
        &format!("dice(p=g) {same:.2e}; dice(disjoint) {disjoint:.6}; dice(half) {third:.7}; bce(0,1,1) {bce:.7} vs ln 2"),
    );
}

// ---------------------------------------------------------------- criterion 3

/// Sort, then linear interpolation at position (n − 1)·q.
fn quantile_oracle(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = (v.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < v.len() {
        v[lo] + (v[lo + 1] - v[lo]) * frac
    } else {
        v[lo]
    }
}

/// Connected components by repeated min-label relaxation over the 26
/// neighbours; returns the indicator of the largest one (ties: the component
/// containing the smallest linear index).
fn flood_fill_oracle(fg: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let mut label: Vec<usize> = (0..fg.len()).map(|i| if fg[i] { i } else { usize::MAX }).collect();
    loop {
        let mut changed = false;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = x + nx * (y + ny * z);
                    if !fg[i] {
                        continue;
                    }
                    for dz in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let (xx, yy, zz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                                if xx < 0 || yy < 0 || zz < 0 || xx >= nx as i64 || yy >= ny as i64 || zz >= nz as i64 {
                                    continue;
                                }
                                let j = xx as usize + nx * (yy as usize + ny * zz as usize);
                                if fg[j] && label[j] < label[i] {
                                    label[i] = label[j];
                                    changed = true;
                                }
                            }
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut counts = std::collections::BTreeMap::<usize, usize>::new();
    for &l in label.iter().filter(|&&l| l != usize::MAX) {
        *counts.entry(l).or_default() += 1;
    }
    // BTreeMap iterates labels (= smallest member index) in increasing order.
    let mut best = (usize::MAX, 0usize);
    for (&l, &c) in &counts {
        if c > best.1 {
            best = (l, c);
        }
    }
    label.iter().map(|&l| l != usize::MAX && l == best.0).collect()
}

#[test]
fn criterion_03_oracle_equivalences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut auc_worst = 0.0f64;
    let mut tied_instances = 0;
    for _ in 0..100 {
        let n = rng.gen_range(2..=50);
        let levels = rng.gen_range(2..=12);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted.dedup();
        if sorted.len() < n {
            tied_instances += 1;
        }
        let d = (roc_auc(&scores, &labels).unwrap() - roc_auc_pairwise(&scores, &labels).unwrap()).abs();
        auc_worst = auc_worst.max(d);
    }

    let mut quantile_mismatch = 0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=60);
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let (m, q1, q3) = median_iqr(&v).unwrap();
        if m != quantile_oracle(&v, 0.5) || q1 != quantile_oracle(&v, 0.25) || q3 != quantile_oracle(&v, 0.75) {
            quantile_mismatch += 1;
        }
    }

    let mut lcc_mismatch = 0;
    let masks = 20;
    for _ in 0..masks {
        let density = rng.gen_range(0.02..0.35);
        let fg: Vec<bool> = (0..16 * 16 * 16).map(|_| rng.gen_bool(density)).collect();
        let vol = Volume::new([16; 3], [1.0; 3], fg.iter().map(|&b| b as u8 as f32).collect()).unwrap();
        let got: Vec<bool> = largest_component(&vol).data().iter().map(|&v| v == 1.0).collect();
        if got != flood_fill_oracle(&fg, [16; 3]) {
            lcc_mismatch += 1;
        }
    }
    let pass = auc_worst <= 1e-12 && tied_instances > 0 && quantile_mismatch == 0 && lcc_mismatch == 0;
    report(
        3,
        "oracle equivalences",
        pass,
        &format!(
            "AUC trapezoid vs pairs max diff {auc_worst:.1e} over 100 instances ({tied_instances} with ties); median/IQR mismatches {quantile_mismatch}/100; largest component mismatches {lcc_mismatch}/{masks} random 16^3 masks"
        ),
    );
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_04_conv_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (n, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let k = [rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3)];
        let stride = [rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=2)];
        let pad = k.map(|k| rng.gen_range(0..=k / 2));
        // Input extents the transpose reproduces exactly: (o − 1)·s − 2p + k.
        let out = [rng.gen_range(2..=6), rng.gen_range(2..=6), rng.gen_range(2..=4)];
        let dims = [0, 1, 2].map(|i| (out[i] - 1) * stride[i] + k[i] - 2 * pad[i]);
        let x = tensor::<f32>(&mut rng, &[n, cin, dims[0], dims[1], dims[2]], -1.0, 1.0);
        let w = tensor::<f32>(&mut rng, &[cout, cin, k[0], k[1], k[2]], -1.0, 1.0);
        let y = tensor::<f32>(&mut rng, &[n, cout, out[0], out[1], out[2]], -1.0, 1.0);
        let ax = conv3d(&x, &w, &Tensor::zeros(&[cout]), stride, pad).unwrap();
        let aty = conv3d_transpose(&y, &w, &Tensor::zeros(&[cin]), stride, pad).unwrap();
        assert_eq!(ax.shape(), y.shape());
        assert_eq!(aty.shape(), x.shape());
        let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(&p, &q)| p as f64 * q as f64).sum::<f64>();
        let lhs = dot(ax.data(), y.data());
        let rhs = dot(x.data(), aty.data());
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12));
    }
    report(4, "conv adjoint identity", worst <= 1e-4, &format!("20 instances, max relative gap {worst:.2e} <= 1e-4"));
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_05_format_round_trips() {
    let dir = scratch("c5");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut nifti_ok = true;
    let case = generate_case(&PhantomConfig::default(), 0).unwrap();
    let odd = Volume::new([7, 5, 3], [0.7, 1.3, 4.5], uniform::<f32>(&mut rng, 105, -1e3, 1e3)).unwrap();
    for (i, v) in [&case.t1c, &case.mask, &odd].into_iter().enumerate() {
        let p = dir.join(format!("v{i}.nii"));
        write_nifti(v, &p).unwrap();
        let back = read_nifti(&p).unwrap();
        let bits = |v: &Volume| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        nifti_ok &= back.dims() == v.dims() && back.spacing() == v.spacing() && bits(&back) == bits(v);
    }

    let cfg = SegNetConfig {
        base_channels: 8,
        depth: 3,
        input_shape: [48, 48, 16],
        ..SegNetConfig::default()
    };
    let net = build_v2netcls::<f32>(&cfg, 5).unwrap();
    let inputs = [tensor::<f32>(&mut rng, &[1, 1, 48, 48, 16], -2.0, 2.0), tensor::<f32>(&mut rng, &[1, 1, 48, 48, 16], -2.0, 2.0)];
    let before = net.forward(&inputs, false).unwrap();
    let path = dir.join("v2netcls.ckpt");
    net.save(&path).unwrap();
    let loaded = SegNet::<f32>::load(&path).unwrap();
    let after = loaded.forward(&inputs, false).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let opt_bits = |t: &Option<Tensor<f32>>| t.as_ref().map(bits);
    let ckpt_ok = bits(&before.prob_map) == bits(&after.prob_map)
        && before.overall_logits.is_some()
        && opt_bits(&before.overall_logits) == opt_bits(&after.overall_logits)
        && opt_bits(&before.t_logits) == opt_bits(&after.t_logits);
    report(
        5,
        "format round trips",
        nifti_ok && ckpt_ok,
        &format!("NIfTI write/read bit-exact: {nifti_ok}; V2NetCls checkpoint save/load/forward bit-exact: {ckpt_ok}"),
    );
}

// ---------------------------------------------------------------- criterion 6

const SEG_EPOCHS: usize = 30;

struct SegFixture {
    checkpoint: PathBuf,
    best_epoch: usize,
    best_mean: f64,
    best_median: f64,
    secs: f64,
}

/// V2NetCls (depth 3, base 8) trained on 40 / 8 phantom cases of 48x48x16.
fn seg_fixture() -> &'static SegFixture {
    static SEG: OnceLock<SegFixture> = OnceLock::new();
    SEG.get_or_init(|| {
        let dir = scratch("c6");
        let ds = generate_dataset(&PhantomConfig::default(), 48, &dir.join("data")).unwrap();
        let (train, val) = split_dataset(&ds.records, 8.0 / 48.0, 0).unwrap();
        assert_eq!((train.len(), val.len()), (40, 8));
        let cfg = TrainConfig {
            epochs: SEG_EPOCHS,
            checkpoint_dir: dir.join("ckpt"),
            ..TrainConfig::segmentation()
        };
        let net_cfg = SegNetConfig {
            base_channels: 8,
            depth: 3,
            input_shape: [48, 48, 16],
            ..SegNetConfig::default()
        };
        let start = Instant::now();
        let out = train_segmentation(&cfg, &net_cfg, Arch::V2netcls, &train, &val).unwrap();
        SegFixture {
            checkpoint: out.checkpoint_path,
            best_epoch: out.best_epoch,
            best_mean: out.best_mean_dice,
            best_median: out.best_median_dice,
            secs: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_06_segmentation_learnability() {
    let _g = heavy();
    let f = seg_fixture();
    report(
        6,
        "phantom segmentation learnability",
        f.best_median >= 0.70,
        &format!(
            "V2NetCls 40/8 cases, {SEG_EPOCHS} epochs, best epoch {}: val median Dice {:.4} >= 0.70 (mean {:.4}); {:.0} s (target < 1800 s)",
            f.best_epoch, f.best_median, f.best_mean, f.secs
        ),
    );
}

// ---------------------------------------------------------------- criterion 7

const CLS_EPOCHS: usize = 40;

#[test]
fn criterion_07_classification_learnability() {
    let _g = heavy();
    let seg = seg_fixture();
    let dir = scratch("c7");
    let ds = generate_dataset(&PhantomConfig { seed: 1, ..PhantomConfig::default() }, 200, &dir.join("data")).unwrap();
    let (train, val) = split_dataset(&ds.records, 0.2, 0).unwrap();
    assert_eq!((train.len(), val.len()), (160, 40));
    let cfg = TrainConfig {
        epochs: CLS_EPOCHS,
        checkpoint_dir: dir.join("ckpt"),
        ..TrainConfig::classification()
    };
    let start = Instant::now();
    let out = train_classifier(&cfg, &ClsNetConfig::default(), &train, &val, &seg.checkpoint).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let op = out.operating_point;
    let pass = out.best_auc >= 0.85 && op.sensitivity >= 0.7 && op.specificity >= 0.7;
    report(
        7,
        "phantom classification learnability",
        pass,
        &format!(
            "ResNet18-3D 160/40 cases, {CLS_EPOCHS} epochs, best epoch {}: val AUC {:.4} >= 0.85, Youden sens {:.3} / spec {:.3} >= 0.7; {secs:.0} s (target < 1200 s)",
            out.best_epoch, out.best_auc, op.sensitivity, op.specificity
        ),
    );
}

// ---------------------------------------------------------------- criterion 8

/// Phantoms where T1C contrast is weak and T2 carries most of the tumor signal.
fn t2_phantom(seed: u64) -> PhantomConfig {
    PhantomConfig {
        dims: [32, 32, 8],
        semi_axis_min_mm: [4.0, 4.0, 3.0],
        semi_axis_max_mm: [9.0, 9.0, 6.0],
        t1c_rim: 0.3,
        t1c_core: 0.2,
        t2_tumor: 0.9,
        noise_sigma: 0.2,
        seed,
        ..PhantomConfig::default()
    }
}

fn mean_val_dice(out: &SegTrainOutcome) -> f64 {
    let d: Vec<f64> = out.val_cases.iter().map(|c| c.dice.unwrap()).collect();
    d.iter().sum::<f64>() / d.len() as f64
}

#[test]
fn criterion_08_baseline_ordering() {
    let _g = heavy();
    let dir = scratch("c8");
    let net_cfg = SegNetConfig {
        base_channels: 8,
        depth: 2,
        input_shape: [32, 32, 8],
        ..SegNetConfig::default()
    };
    let (mut v2, mut v1) = (Vec::new(), Vec::new());
    for seed in 0..3u64 {
        let ds = generate_dataset(&t2_phantom(seed), 32, &dir.join(format!("data{seed}"))).unwrap();
        let (train, val) = split_dataset(&ds.records, 0.25, seed).unwrap();
        for (arch, sink) in [(Arch::V2net, &mut v2), (Arch::Vnet, &mut v1)] {
            let cfg = TrainConfig {
                seed,
                epochs: 20,
                lr: 1e-3,
                checkpoint_dir: dir.join(format!("{arch}_{seed}")),
                ..TrainConfig::segmentation()
            };
            let arch_cfg = net_cfg.clone().for_arch(arch).unwrap();
            let out = train_segmentation(&cfg, &arch_cfg, arch, &train, &val).unwrap();
            sink.push(mean_val_dice(&out));
        }
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m2, m1) = (avg(&v2), avg(&v1));
    let fmt = |v: &[f64]| v.iter().map(|d| format!("{d:.3}")).collect::<Vec<_>>().join(", ");
    report(
        8,
        "baseline ordering V2Net vs VNet-T1C",
        m2 >= m1 - 0.02,
        &format!("mean val Dice over 3 seeds: V2Net {m2:.4} [{}] >= VNet-T1C {m1:.4} [{}] - 0.02", fmt(&v2), fmt(&v1)),
    );
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn criterion_09_train_seg_determinism() {
    let dir = scratch("c9");
    let cfg = serde_json::json!({
        "phantom_cases": 8,
        "phantom": {"dims": [32, 32, 8], "semi_axis_min_mm": [4.0, 4.0, 4.0], "semi_axis_max_mm": [8.0, 8.0, 6.0]},
        "seg_net": {"base_channels": 4, "depth": 2, "convs_per_level": 1, "input_shape": [32, 32, 8]},
        "seg_train": {"epochs": 2, "lr": 0.001, "val_fraction": 0.25},
        "paths": {"phantom_dir": dir.join("data")}
    });
    let cfg_path = dir.join("run.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let bin = env!("CARGO_BIN_EXE_v2netcls");
    let run = |args: &[&str]| {
        let o = Command::new(bin).args(args).env("RUST_LOG", "warn").output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    let c = cfg_path.to_str().unwrap();
    run(&["gen-phantom", "--config", c, "--seed", "9"]);
    let manifest = dir.join("data/manifest.jsonl");
    let m = manifest.to_str().unwrap();
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.join(name);
        run(&["train-seg", "--config", c, "--seed", "9", "--manifest", m, "--out-dir", out.to_str().unwrap()]);
        csvs.push(std::fs::read(out.join("v2netcls_history.csv")).unwrap());
    }
    let rows = String::from_utf8_lossy(&csvs[0]).lines().count().saturating_sub(1);
    report(
        9,
        "train-seg determinism",
        csvs[0] == csvs[1] && rows == 2,
        &format!("two seeded runs, history CSVs byte-identical: {} ({} bytes, {rows} epochs)", csvs[0] == csvs[1], csvs[0].len()),
    );
}

// ---------------------------------------------------------------- criterion 10

/// Axis-aligned boxes separated by at least one empty x-plane, so each box is
/// its own 26-connected component.
fn random_boxes(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Vec<([usize; 3], [usize; 3])> {
    let mut k = rng.gen_range(0..=3usize);
    while k > 0 && 2 * k - 1 > dims[0] {
        k -= 1;
    }
    let mut boxes = Vec::new();
    if k == 0 {
        return boxes;
    }
    // Slab j spans [start_j, end_j]; slabs are separated by one empty plane.
    let slab = (dims[0] + 1) / k;
    for j in 0..k {
        let start = j * slab;
        let end = ((j + 1) * slab).min(dims[0] + 1) - 2;
        let end = end.max(start);
        let x0 = rng.gen_range(start..=end);
        let x1 = rng.gen_range(x0..=end);
        let y0 = rng.gen_range(0..dims[1]);
        let y1 = rng.gen_range(y0..dims[1]);
        let z0 = rng.gen_range(0..dims[2]);
        let z1 = rng.gen_range(z0..dims[2]);
        boxes.push(([x0, y0, z0], [x1, y1, z1]));
    }
    boxes
}

#[test]
fn criterion_10_crop_geometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let size = CROP_SIZE;
    let mut failures = Vec::new();
    let mut fallbacks = 0;
    for case in 0..500 {
        let dims = [rng.gen_range(1..=90), rng.gen_range(1..=90), rng.gen_range(1..=24)];
        let n: usize = dims.iter().product();
        let boxes = random_boxes(&mut rng, dims);
        let mut mask = vec![0.0f32; n];
        for (lo, hi) in &boxes {
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        mask[x + dims[0] * (y + dims[1] * z)] = 1.0;
                    }
                }
            }
        }
        let t1c = Volume::new(dims, [1.0; 3], uniform(&mut rng, n, -3.0, 3.0)).unwrap();
        let t2 = Volume::new(dims, [1.0; 3], uniform(&mut rng, n, -3.0, 3.0)).unwrap();
        let mask_vol = Volume::new(dims, [1.0; 3], mask).unwrap();
        let crop = extract_crop(&t1c, &t2, &mask_vol, size).unwrap();

        // Largest box; ties go to the box whose first voxel comes first in memory order.
        let volume = |b: &([usize; 3], [usize; 3])| (0..3).map(|i| b.1[i] - b.0[i] + 1).product::<usize>();
        let first = |b: &([usize; 3], [usize; 3])| b.0[0] + dims[0] * (b.0[1] + dims[1] * b.0[2]);
        let best = boxes.iter().max_by(|a, b| volume(a).cmp(&volume(b)).then(first(b).cmp(&first(a))));
        let center = match best {
            Some((lo, hi)) => [0, 1, 2].map(|i| ((lo[i] + hi[i]) as f64 / 2.0 + 0.5).floor() as usize),
            None => dims.map(|d| d / 2),
        };
        let origin: [usize; 3] = [0, 1, 2].map(|i| {
            let start = center[i] as i64 - (size[i] / 2) as i64;
            start.clamp(0, (dims[i] as i64 - size[i] as i64).max(0)) as usize
        });
        fallbacks += best.is_none() as usize;

        let mut ok = crop.data.shape() == [3, size[0], size[1], size[2]]
            && crop.origin == origin
            && crop.fallback_used == best.is_none();
        let plane = size.iter().product::<usize>();
        let d = crop.data.data();
        ok &= d[2 * plane..].iter().all(|&v| v == 0.0 || v == 1.0);
        if ok {
            'scan: for x in 0..size[0] {
                for y in 0..size[1] {
                    for z in 0..size[2] {
                        let (sx, sy, sz) = (origin[0] + x, origin[1] + y, origin[2] + z);
                        let inside = sx < dims[0] && sy < dims[1] && sz < dims[2];
                        let dst = (x * size[1] + y) * size[2] + z;
                        let (want_t1, want_t2, want_m) = if inside {
                            let in_best = best.is_some_and(|(lo, hi)| (0..3).all(|i| [sx, sy, sz][i] >= lo[i] && [sx, sy, sz][i] <= hi[i]));
                            (t1c.get(sx, sy, sz), t2.get(sx, sy, sz), in_best as u8 as f32)
                        } else {
                            (0.0, 0.0, 0.0)
                        };
                        if d[dst] != want_t1 || d[plane + dst] != want_t2 || d[2 * plane + dst] != want_m {
                            ok = false;
                            break 'scan;
                        }
                    }
                }
            }
        }
        if !ok {
            failures.push(case);
        }
    }
    report(
        10,
        "crop geometry",
        failures.is_empty(),
        &format!("500 random geometries ({fallbacks} empty masks): shape, binary mask channel, origin and contents vs oracle; failures {failures:?}"),
    );
}
