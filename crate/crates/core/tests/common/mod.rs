#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pushdiging::engine::StepSizes;
use pushdiging::graphs::{make_periodic_partition, make_random_sequence, make_ring, GraphSequence};
use pushdiging::objectives::{make_sensor_suite, ObjectiveSuite};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SENSOR_A: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];
pub const SENSOR_B: [f64; 5] = [3.33, 1.67, 1.11, 0.83, 0.67];
pub const SENSOR_C: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
pub const SENSOR_D: [f64; 5] = [0.035, 0.015, 0.025, 0.045, 0.055];
pub const SENSOR_X0: [f64; 5] = [0.1, 0.9, 0.3, 0.5, 0.7];

pub fn sensor_suite() -> ObjectiveSuite {
    make_sensor_suite(&SENSOR_A, &SENSOR_B, &SENSOR_C).unwrap()
}

pub fn sensor_steps() -> StepSizes {
    StepSizes::new(SENSOR_D.to_vec()).unwrap()
}

pub fn sensor_x0() -> DMatrix<f64> {
    DMatrix::from_column_slice(5, 1, &SENSOR_X0)
}

/// One seeded Push-DIGing setup.
pub struct Scenario {
    pub label: String,
    pub seq: GraphSequence,
    pub suite: ObjectiveSuite,
    pub steps: StepSizes,
    pub x0: DMatrix<f64>,
}

/// Seeded setups over `N in {1, 2, 3, 5, 8}` cycling through ring, periodic
/// partition and random generators, with random sensor objectives and
/// step-sizes.
pub fn scenario_family(count: usize) -> Vec<Scenario> {
    const SIZES: [usize; 5] = [1, 2, 3, 5, 8];
    (0..count)
        .map(|i| {
            let seed = i as u64;
            let n = SIZES[i % SIZES.len()];
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let (kind, seq) = match (i / SIZES.len()) % 3 {
                0 => ("ring", make_ring(n).unwrap()),
                1 => {
                    let b0 = 1 + i % 3;
                    ("partition", make_periodic_partition(n, b0, seed).unwrap())
                }
                _ => ("random", make_random_sequence(n, 0.4, 3, 200, seed).unwrap()),
            };
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.6..3.5)).collect();
            let c: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.005..0.06)).collect();
            let x0 = DMatrix::from_fn(n, 1, |_, _| rng.random_range(0.0..1.0));
            Scenario {
                label: format!("{kind} N={n} seed={seed}"),
                seq,
                suite: make_sensor_suite(&a, &b, &c).unwrap(),
                steps: StepSizes::new(d).unwrap(),
                x0,
            }
        })
        .collect()
}

/// Least-squares slope, intercept and coefficient of determination.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    (slope, intercept, 1.0 - sse / syy)
}

/// Gradient of `a + (x - c)^2 / b`.
pub fn sensor_gradient(x: f64, b: f64, c: f64) -> f64 {
    2.0 * (x - c) / b
}

pub fn column(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
