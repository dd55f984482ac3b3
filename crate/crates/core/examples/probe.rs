//! Scratch diagnostics (not part of the deliverable).

use gradinv::fl_sim::{capture_fedsgd, Batch, MlpModel};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() {
    let (m, n, b) = (64usize, 48usize, 4usize);
    let seed = 34u64;
    let model = MlpModel::random(n, m, 3, 10, 1000 + seed);
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
    let inputs = DMatrix::from_fn(n, b, |_, _| rng.sample::<f64, _>(StandardNormal));
    let labels = (0..b).map(|_| rng.gen_range(0..10)).collect();
    let batch = Batch::new(inputs, labels).unwrap();
    let capture = capture_fedsgd(&model, &batch, seed).unwrap();
    let dw = &capture.weight_gradient;

    let svd = dw.clone().try_svd(true, true, f64::EPSILON, 0).unwrap();
    let u = svd.u.as_ref().unwrap();
    let v_t = svd.v_t.as_ref().unwrap();
    let sv = &svd.singular_values;
    println!("svd sizes: u {:?} v_t {:?} sv {}", u.shape(), v_t.shape(), sv.len());
    let rebuilt = u * DMatrix::from_diagonal(sv) * v_t;
    println!("full reconstruction max err: {:e}", (&rebuilt - dw).abs().max());
    println!("sv sorted? {:?}", sv.iter().take(8).collect::<Vec<_>>());
    // orthonormality of u
    let gram = u.transpose() * u;
    let eye = DMatrix::<f64>::identity(gram.nrows(), gram.ncols());
    println!("U'U - I max: {:e}", (&gram - &eye).abs().max());
    let gram_v = v_t * v_t.transpose();
    let eye_v = DMatrix::<f64>::identity(gram_v.nrows(), gram_v.ncols());
    println!("VtVt' - I max: {:e}", (&gram_v - &eye_v).abs().max());

    // svd() convenience (ordered?) vs try_svd
    let svd2 = dw.clone().svd(true, true);
    let rebuilt2 = svd2.u.as_ref().unwrap() * DMatrix::from_diagonal(&svd2.singular_values) * svd2.v_t.as_ref().unwrap();
    println!("svd() reconstruction max err: {:e}", (&rebuilt2 - dw).abs().max());
}
