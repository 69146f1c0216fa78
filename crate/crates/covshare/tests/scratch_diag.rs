//! Temporary diagnostics (deleted before finalization).
use covshare::gibbs::{run_chain_full, ChainConfig};
use covshare::model::scatter_from_data;
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

#[test]
fn probe_full_chain_dispersion() {
    let mut rng = ChaCha20Rng::seed_from_u64(4242);
    let p = 200;
    let n = 50;
    let g = DMatrix::from_fn(p, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let u_true = g.qr().q();
    let lambdas = [250.0_f64, 25.0];
    let mut y = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    for i in 0..n {
        let row = y.row(i).transpose();
        let coeff = u_true.transpose() * &row;
        let mut boost = DVector::zeros(p);
        for j in 0..2 {
            boost += u_true.column(j).scale(coeff[j] * ((lambdas[j] + 1.0).sqrt() - 1.0));
        }
        let new_row = &row + boost;
        y.set_row(i, &new_row.transpose());
    }
    let data = scatter_from_data(&y).unwrap();

    // sample eigvectors (the conditioning reference)
    let eig = data.scatter().clone().symmetric_eigen();
    let mut idx: Vec<usize> = (0..p).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let v1 = eig.eigenvectors.column(idx[0]).into_owned();
    let v2 = eig.eigenvectors.column(idx[1]).into_owned();
    eprintln!("sample eigs: {:.1} {:.1} {:.1}", eig.eigenvalues[idx[0]], eig.eigenvalues[idx[1]], eig.eigenvalues[idx[2]]);
    eprintln!("freq overlap: |<v1,u1>|^2={:.3} |<v2,u2>|^2={:.3}",
        v1.dot(&u_true.column(0).into_owned()).powi(2),
        v2.dot(&u_true.column(1).into_owned()).powi(2));

    let config = ChainConfig { n_iter: 3000, burn_in: 1000, thin: 2, seed: 1, omega_grid: 1024 };
    let chain = run_chain_full(&data, 2, &config, 0).unwrap();
    let m = chain.draws.len() as f64;
    let mean_a1: f64 = chain.draws.iter().map(|d| d.eigvecs().column(0).dot(&v1).powi(2)).sum::<f64>() / m;
    let mean_a2: f64 = chain.draws.iter().map(|d| d.eigvecs().column(1).dot(&v2).powi(2)).sum::<f64>() / m;
    let mean_w1: f64 = chain.draws.iter().map(|d| d.omega()[0]).sum::<f64>() / m;
    let mean_w2: f64 = chain.draws.iter().map(|d| d.omega()[1]).sum::<f64>() / m;
    let mean_s2: f64 = chain.draws.iter().map(|d| d.sigma2()).sum::<f64>() / m;
    eprintln!("posterior: E<u1,v1>^2={mean_a1:.3} E<u2,v2>^2={mean_a2:.3} E w=({mean_w1:.4},{mean_w2:.4}) E sigma2={mean_s2:.4}");
    eprintln!("lambda from w: ({:.1}, {:.1})", mean_w1/(1.0-mean_w1), mean_w2/(1.0-mean_w2));

    // r = 1 chain: isolate the column sampler at high concentration.
    let config1 = ChainConfig { n_iter: 1500, burn_in: 500, thin: 1, seed: 2, omega_grid: 1024 };
    let chain1 = run_chain_full(&data, 1, &config1, 0).unwrap();
    let m1 = chain1.draws.len() as f64;
    let a1: f64 = chain1.draws.iter().map(|d| d.eigvecs().column(0).dot(&v1).powi(2)).sum::<f64>() / m1;
    let w1: f64 = chain1.draws.iter().map(|d| d.omega()[0]).sum::<f64>() / m1;
    let s21: f64 = chain1.draws.iter().map(|d| d.sigma2()).sum::<f64>() / m1;
    eprintln!("r=1 chain: E<u,v1>^2={a1:.4} E w={w1:.4} E s2={s21:.4}");
    for j in [0usize, 1, 2, 3, 500, 999] {
        let d = &chain1.draws[j];
        eprintln!("  draw {j}: align={:.4} w={:.4} s2={:.4}", d.eigvecs().column(0).dot(&v1).powi(2), d.omega()[0], d.sigma2());
    }
}
