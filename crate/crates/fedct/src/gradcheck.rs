//! Finite-difference verification suite covering every tape operator and the
//! composed model paths on 16x16 instances.

use crate::autodiff::{
    check_gradients, check_gradients_subset, relative_error, FdEntry, FdReport, NodeId, Tape,
    Tensor,
};
use crate::model::{
    anatomy_map, bind_model_from_ids, decode, encode, forward, image_leaf, model_leaf_tensors,
    modulate, protocol_leaf, scanning_code, scanning_modulation, AblationFlags, ModelConfig,
    ModelParameters,
};
use crate::protocol::{builtin_known_protocols, normalize_protocol, protocol_stats};
use crate::ctphys::ImageGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    // Magnitudes bounded away from zero keep relu kinks clear of the
    // finite-difference step.
    let data = (0..n)
        .map(|_| {
            let mag = 0.3 + 0.7 * rng.random::<f64>();
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data)
}

fn named(pairs: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn operator_checks(report: &mut FdReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xFD);

    let ab = named(vec![
        ("a", rng_tensor(&mut rng, vec![3, 4])),
        ("b", rng_tensor(&mut rng, vec![3, 4])),
    ]);
    report.merge(check_gradients(
        "op/add_sub_mul",
        |tape, ids| {
            let s = tape.add(ids[0], ids[1]).unwrap();
            let d = tape.sub(s, ids[1]).unwrap();
            let m = tape.mul(d, ids[1]).unwrap();
            tape.mean_all(m).unwrap()
        },
        &ab,
        1e-5,
        1e-5,
    ));

    let bc = named(vec![
        ("full", rng_tensor(&mut rng, vec![3, 2, 2])),
        ("bmap", rng_tensor(&mut rng, vec![1, 2, 2])),
    ]);
    report.merge(check_gradients(
        "op/broadcast_mul",
        |tape, ids| {
            let m = tape.mul(ids[0], ids[1]).unwrap();
            let sq = tape.mul(m, m).unwrap();
            tape.mean_all(sq).unwrap()
        },
        &bc,
        1e-5,
        1e-5,
    ));

    let sc = named(vec![("x", rng_tensor(&mut rng, vec![5]))]);
    report.merge(check_gradients(
        "op/scale_sum",
        |tape, ids| {
            let s = tape.scale(ids[0], -2.5).unwrap();
            tape.sum_all(s).unwrap()
        },
        &sc,
        1e-5,
        1e-5,
    ));

    let re = named(vec![("x", rng_tensor(&mut rng, vec![4, 4]))]);
    report.merge(check_gradients(
        "op/relu",
        |tape, ids| {
            let r = tape.relu(ids[0]).unwrap();
            let sq = tape.mul(r, r).unwrap();
            tape.mean_all(sq).unwrap()
        },
        &re,
        1e-5,
        1e-5,
    ));

    let sm = named(vec![("x", rng_tensor(&mut rng, vec![3, 5]))]);
    report.merge(check_gradients(
        "op/softmax",
        |tape, ids| {
            let s = tape.softmax(ids[0]).unwrap();
            let sq = tape.mul(s, s).unwrap();
            tape.mean_all(sq).unwrap()
        },
        &sm,
        1e-5,
        1e-5,
    ));

    let mm = named(vec![
        ("a", rng_tensor(&mut rng, vec![3, 4])),
        ("b", rng_tensor(&mut rng, vec![4, 2])),
    ]);
    report.merge(check_gradients(
        "op/matmul_transpose",
        |tape, ids| {
            let p = tape.matmul(ids[0], ids[1]).unwrap();
            let t = tape.transpose(p).unwrap();
            let sq = tape.mul(t, t).unwrap();
            tape.mean_all(sq).unwrap()
        },
        &mm,
        1e-5,
        1e-5,
    ));

    let rs = named(vec![("x", rng_tensor(&mut rng, vec![2, 6]))]);
    report.merge(check_gradients(
        "op/reshape",
        |tape, ids| {
            let r = tape.reshape(ids[0], vec![3, 4]).unwrap();
            let sq = tape.mul(r, r).unwrap();
            tape.mean_all(sq).unwrap()
        },
        &rs,
        1e-5,
        1e-5,
    ));

    let ln = named(vec![
        ("x", rng_tensor(&mut rng, vec![1, 6])),
        ("w", rng_tensor(&mut rng, vec![6, 4])),
        ("b", rng_tensor(&mut rng, vec![4])),
    ]);
    report.merge(check_gradients(
        "op/linear",
        |tape, ids| {
            let y = tape.linear(ids[0], ids[1], ids[2]).unwrap();
            let sq = tape.mul(y, y).unwrap();
            tape.mean_all(sq).unwrap()
        },
        &ln,
        1e-5,
        1e-5,
    ));

    let cv = named(vec![
        ("x", rng_tensor(&mut rng, vec![2, 4, 4])),
        ("w", rng_tensor(&mut rng, vec![3, 2, 3, 3])),
        ("b", rng_tensor(&mut rng, vec![3])),
    ]);
    report.merge(check_gradients(
        "op/conv2d",
        |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], ids[2]).unwrap();
            tape.mean_all(y).unwrap()
        },
        &cv,
        1e-5,
        1e-5,
    ));

    let ap = named(vec![("x", rng_tensor(&mut rng, vec![1, 16]))]);
    report.merge(check_gradients(
        "op/avgpool1d",
        |tape, ids| {
            let p = tape.avgpool1d(ids[0], 4).unwrap();
            let sq = tape.mul(p, p).unwrap();
            tape.mean_all(sq).unwrap()
        },
        &ap,
        1e-5,
        1e-5,
    ));

    let ca = named(vec![
        ("x", rng_tensor(&mut rng, vec![3, 4, 4])),
        ("alpha", rng_tensor(&mut rng, vec![3])),
        ("beta", rng_tensor(&mut rng, vec![3])),
    ]);
    report.merge(check_gradients(
        "op/channel_affine",
        |tape, ids| {
            let y = tape.channel_affine(ids[0], ids[1], ids[2]).unwrap();
            let sq = tape.mul(y, y).unwrap();
            tape.mean_all(sq).unwrap()
        },
        &ca,
        1e-5,
        1e-5,
    ));

    let sm2 = named(vec![
        ("a", rng_tensor(&mut rng, vec![3, 4])),
        ("b", rng_tensor(&mut rng, vec![4, 3])),
    ]);
    report.merge(check_gradients(
        "op/softmax_matmul_chain",
        |tape, ids| {
            let y = tape.matmul(ids[0], ids[1]).unwrap();
            let s = tape.softmax(y).unwrap();
            let sq = tape.mul(s, s).unwrap();
            tape.mean_all(sq).unwrap()
        },
        &sm2,
        1e-5,
        1e-4,
    ));
}

/// Tiny configuration for the composed checks: full structure, 16x16 grid.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        channels: 4,
        report_dim: 16,
        hidden_dim: 8,
        code_dim: 4,
        n_heads: 2,
        token_count: 4,
        image_size: 16,
    }
}

fn gradcheck_inputs(cfg: &ModelConfig) -> (ImageGrid, Vec<f64>) {
    let s = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(0x1A);
    let img = ImageGrid::new(s, 1.0, (0..s * s).map(|_| rng.random::<f64>()).collect());
    let mut ft: Vec<f64> = (0..cfg.report_dim)
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    let norm = ft.iter().map(|x| x * x).sum::<f64>().sqrt();
    ft.iter_mut().for_each(|x| *x /= norm);
    (img, ft)
}

/// Check every model parameter of the composed path `build_loss` against
/// central finite differences. Leaves are registered by the checker and
/// handed to the model by id, so gradients and perturbations both act on the
/// same tensors.
fn model_path_check(
    name: &str,
    params: &ModelParameters,
    client: u32,
    h: f64,
    tol: f64,
    build_loss: impl Fn(&mut Tape, &crate::model::BoundModel) -> NodeId,
) -> FdReport {
    let leaves = model_leaf_tensors(params, client).unwrap();
    let cfg = params.cfg;
    check_gradients(
        name,
        move |tape, ids| {
            let m = bind_model_from_ids(&cfg, ids);
            build_loss(tape, &m)
        },
        &leaves,
        h,
        tol,
    )
}

/// Run the whole verification suite. `inject_bug` adds a fixture entry whose
/// analytic gradient is deliberately negated; it must fail, proving the
/// harness detects broken adjoints.
pub fn run_full_suite(inject_bug: bool) -> FdReport {
    let mut report = FdReport::default();
    operator_checks(&mut report);

    let cfg = gradcheck_config();
    let params = ModelParameters::init_unstructured(&cfg, 0x5EED, &[1]).unwrap();
    let (img, ft) = gradcheck_inputs(&cfg);
    let known = builtin_known_protocols();
    let stats = protocol_stats(&known).unwrap();
    let g = normalize_protocol(&known[0], &stats);

    {
        let img = img.clone();
        report.merge(model_path_check(
            "model/encoder_mean",
            &params,
            1,
            1e-5,
            1e-4,
            move |tape, m| {
                let x = image_leaf(tape, &img);
                let fx = encode(tape, m, x).unwrap();
                tape.mean_all(fx).unwrap()
            },
        ));
    }
    {
        let g2 = g;
        report.merge(model_path_check(
            "model/scanning_alpha_sum",
            &params,
            1,
            1e-5,
            1e-4,
            move |tape, m| {
                let gid = protocol_leaf(tape, &g2);
                let (alpha, _beta) = scanning_modulation(tape, m, gid).unwrap();
                tape.sum_all(alpha).unwrap()
            },
        ));
    }
    {
        let g2 = g;
        report.merge(model_path_check(
            "model/scanning_code_sum",
            &params,
            1,
            1e-5,
            1e-4,
            move |tape, m| {
                let gid = protocol_leaf(tape, &g2);
                let code = scanning_code(tape, m, gid).unwrap();
                let sq = tape.mul(code, code).unwrap();
                tape.sum_all(sq).unwrap()
            },
        ));
    }
    {
        let ft2 = ft.clone();
        report.merge(model_path_check(
            "model/anatomy_map_mean",
            &params,
            1,
            1e-5,
            1e-4,
            move |tape, m| {
                let fid = tape.leaf(Tensor::new(vec![1, ft2.len()], ft2.clone()));
                let fan = anatomy_map(tape, m, fid).unwrap();
                let sq = tape.mul(fan, fan).unwrap();
                tape.mean_all(sq).unwrap()
            },
        ));
    }
    {
        // End-to-end: full dual-level forward, mean-squared error against a
        // fixed reference. Gradient magnitudes span ~1e-9 (attention path)
        // to ~1e-1 (encoder), so the finite-difference step is chosen per
        // group: a small step for the kink-sensitive conv paths, a larger
        // one so the tiny anatomy-path gradients stay above the f64
        // cancellation noise of the loss.
        let reference = {
            let mut rng = ChaCha8Rng::seed_from_u64(0x2B);
            let s = cfg.image_size;
            ImageGrid::new(s, 1.0, (0..s * s).map(|_| rng.random::<f64>()).collect())
        };
        let leaves = model_leaf_tensors(&params, 1).unwrap();
        let ha_subset: Vec<usize> = leaves
            .iter()
            .enumerate()
            .filter(|(_, (n, _))| n.starts_with("ha."))
            .map(|(i, _)| i)
            .collect();
        let conv_subset: Vec<usize> = (0..leaves.len())
            .filter(|i| !ha_subset.contains(i))
            .collect();
        let cfg2 = cfg;
        let img2 = img.clone();
        let ft2 = ft.clone();
        let build = move |tape: &mut Tape, ids: &[NodeId]| {
            let m = bind_model_from_ids(&cfg2, ids);
            let x = image_leaf(tape, &img2);
            let fid = tape.leaf(Tensor::new(vec![1, ft2.len()], ft2.clone()));
            let gid = protocol_leaf(tape, &g);
            let pred = forward(tape, &m, x, gid, fid, AblationFlags::default()).unwrap();
            let r = image_leaf(tape, &reference);
            let diff = tape.sub(pred, r).unwrap();
            let sq = tape.mul(diff, diff).unwrap();
            let mse = tape.mean_all(sq).unwrap();
            // Keep the scalar in the regime of a real normalized-image MSE.
            tape.scale(mse, 0.01).unwrap()
        };
        report.merge(check_gradients_subset(
            "model/forward_mse",
            &build,
            &leaves,
            &conv_subset,
            1e-5,
            1e-4,
        ));
        report.merge(check_gradients_subset(
            "model/forward_mse",
            &build,
            &leaves,
            &ha_subset,
            1e-3,
            1e-4,
        ));
    }
    {
        // Modulation block in isolation.
        let mut rng = ChaCha8Rng::seed_from_u64(0x3C);
        let leaves = named(vec![
            ("fx", rng_tensor(&mut rng, vec![4, 6, 6])),
            ("fan", rng_tensor(&mut rng, vec![1, 6, 6])),
            ("alpha", rng_tensor(&mut rng, vec![4])),
            ("beta", rng_tensor(&mut rng, vec![4])),
        ]);
        report.merge(check_gradients(
            "model/modulate",
            |tape, ids| {
                let y = modulate(tape, ids[0], ids[1], ids[2], ids[3]).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.mean_all(sq).unwrap()
            },
            &leaves,
            1e-5,
            1e-5,
        ));
    }
    {
        // Decoder with its residual path.
        let img2 = img.clone();
        report.merge(model_path_check(
            "model/decode_residual",
            &params,
            1,
            1e-5,
            1e-4,
            move |tape, m| {
                let x = image_leaf(tape, &img2);
                let fx = encode(tape, m, x).unwrap();
                let pred = decode(tape, m, fx, x).unwrap();
                let sq = tape.mul(pred, pred).unwrap();
                tape.mean_all(sq).unwrap()
            },
        ));
    }

    if inject_bug {
        // Mutation fixture: a correct numeric gradient compared against a
        // sign-flipped analytic gradient. This entry must FAIL.
        let mut rng = ChaCha8Rng::seed_from_u64(0x4D);
        let x = rng_tensor(&mut rng, vec![3, 3]);
        let build = |tape: &mut Tape, ids: &[NodeId]| {
            let sq = tape.mul(ids[0], ids[0]).unwrap();
            tape.mean_all(sq).unwrap()
        };
        let numeric = crate::autodiff::finite_diff_gradients(build, &[x.clone()], 1e-5);
        let mut tape = Tape::new();
        let id = tape.leaf(x);
        let out = build(&mut tape, &[id]);
        let grads = tape.backward(out).unwrap();
        let max_rel = grads
            .get(id)
            .data()
            .iter()
            .zip(numeric[0].data())
            .map(|(a, n)| relative_error(-a, *n))
            .fold(0.0f64, f64::max);
        report.entries.push(FdEntry {
            name: "fixture/injected_sign_flip".into(),
            max_rel_err: max_rel,
            tol: 1e-4,
            pass: max_rel <= 1e-4,
        });
    }

    report
}
