//! Convergence checks of the reference oracles.

use nestmc::oracle::{
    toy_pde_value, zariphopoulou_value_1d, zariphopoulou_value_nd, zariphopoulou_value_nd_joint, CirPathConfig,
};
use nestmc::problems::{HjbParams, ToyParams};

#[test]
fn euler_oracle_converged_in_steps() {
    let p = HjbParams::default();
    let value = |n_steps| {
        let cfg = CirPathConfig {
            n_steps,
            n_paths: 1_000_000,
        };
        zariphopoulou_value_1d(&p, 0.0, p.x0_wealth, p.y0, cfg, 5, 4).unwrap()
    };
    let (coarse, fine) = (value(200), value(400));
    assert!(
        (coarse.value - fine.value).abs() < fine.stderr,
        "{coarse:?} vs {fine:?}"
    );
}

#[test]
fn factorised_and_joint_values_agree() {
    let assets = [
        HjbParams::default(),
        HjbParams {
            k: 0.2,
            ..HjbParams::default()
        },
        HjbParams {
            mu: 0.08,
            ..HjbParams::default()
        },
    ];
    let y = [0.3, 0.25, 0.35];
    let cfg = CirPathConfig {
        n_steps: 100,
        n_paths: 200_000,
    };
    let a = zariphopoulou_value_nd(&assets, 0.0, 1.0, &y, cfg, 2, 2).unwrap();
    let b = zariphopoulou_value_nd_joint(&assets, 0.0, 1.0, &y, cfg, 3, 2).unwrap();
    let combined = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
    assert!((a.value - b.value).abs() <= 3.0 * combined, "{a:?} vs {b:?}");
}

#[test]
fn toy_pde_oracle_grid_converged() {
    let p = ToyParams::default();
    let coarse = toy_pde_value(&p, 3, 1.5, 256, true).unwrap();
    let fine = toy_pde_value(&p, 3, 1.5, 512, true).unwrap();
    assert!((coarse - fine).abs() < 1e-4, "{coarse} vs {fine}");
}
