//! WebAssembly bindings for the static page in `www/`.
//!
//! Everything runs on the exact finite-support oracle, so no trained
//! checkpoint is needed in the browser.

use mflab::analysis::{budget, energy_distance, BudgetSpec};
use mflab::dataset::FiniteSupportDataset;
use mflab::oracle::Oracle;
use mflab::rng::LabRng;
use mflab::schedule::Schedule;
use mflab::solver::{solve_pfode, FnField, Method};
use mflab::tensor::Tensor;
use mflab::Result;
use wasm_bindgen::prelude::*;

/// Where sampling stops; the oracle is singular at t = 0.
pub const T_END: f64 = 1e-3;
const TRANSPORT_STEPS: usize = 400;

fn js_err(e: mflab::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn ring(modes: usize, radius: f64) -> Result<FiniteSupportDataset> {
    if modes == 0 || !(radius > 0.0) {
        return Err(mflab::Error::Config(
            "ring needs at least one mode and a positive radius".into(),
        ));
    }
    Ok(FiniteSupportDataset::ring(modes, radius))
}

/// Oracle velocity on a `grid` x `grid` lattice over `[-extent, extent]^2`,
/// flattened as `x, y, vx, vy` per node.
pub fn field_on_grid(
    modes: usize,
    radius: f64,
    t: f64,
    grid: usize,
    extent: f64,
) -> Result<Vec<f64>> {
    let data = ring(modes, radius)?;
    let oracle = Oracle::new(&data, Schedule::Linear);
    let step = if grid > 1 {
        2.0 * extent / (grid - 1) as f64
    } else {
        0.0
    };
    let mut out = Vec::with_capacity(grid * grid * 4);
    for i in 0..grid {
        for j in 0..grid {
            let z = [-extent + j as f64 * step, -extent + i as f64 * step];
            let v = oracle.velocity(&z, t)?;
            out.extend_from_slice(&[z[0], z[1], v[0], v[1]]);
        }
    }
    Ok(out)
}

/// Result of pushing the same noise through Euler and through the exact map.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub noise: Vec<Vec<f64>>,
    pub euler: Vec<Vec<f64>>,
    pub exact: Vec<Vec<f64>>,
    pub euler_ed: f64,
    pub exact_ed: f64,
}

/// Draws `n` noise points and maps them with `euler_steps` Euler steps and
/// with one jump of the exact average velocity. Energy distances are taken
/// against the ring atoms.
pub fn compare(
    modes: usize,
    radius: f64,
    n: usize,
    euler_steps: usize,
    seed: u64,
) -> Result<Comparison> {
    let data = ring(modes, radius)?;
    let oracle = Oracle::new(&data, Schedule::Linear);
    let mut rng = LabRng::named(seed, "web-demo");
    let noise: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.normal(), rng.normal()]).collect();
    let field =
        FnField(|z: &[f64], t: f64| oracle.velocity(z, t).unwrap_or_else(|_| vec![f64::NAN; 2]));
    let euler = if n == 0 {
        Vec::new()
    } else {
        let traj = solve_pfode(
            &field,
            &Tensor::from_rows(&noise)?,
            &vec![0; n],
            1.0,
            T_END,
            euler_steps,
            Method::Euler,
        )?;
        let end = traj.endpoints();
        (0..end.rows()).map(|i| end.row_slice(i).to_vec()).collect()
    };
    let exact = noise
        .iter()
        .map(|z| {
            let h = oracle.meanflow(z, 1.0, T_END, TRANSPORT_STEPS)?;
            Ok(z.iter()
                .zip(&h)
                .map(|(zi, hi)| zi - (1.0 - T_END) * hi)
                .collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let (euler_ed, exact_ed) = if n == 0 {
        (0.0, 0.0)
    } else {
        (
            energy_distance(&euler, &data.atoms)?,
            energy_distance(&exact, &data.atoms)?,
        )
    };
    Ok(Comparison {
        noise,
        euler,
        exact,
        euler_ed,
        exact_ed,
    })
}

#[wasm_bindgen]
pub fn velocity_field(
    modes: usize,
    radius: f64,
    t: f64,
    grid: usize,
    extent: f64,
) -> Result<Vec<f64>, JsError> {
    field_on_grid(modes, radius, t, grid, extent).map_err(js_err)
}

/// Flat layout: `[euler_ed, exact_ed, n, noise.., euler.., exact..]`, each
/// point as `x, y`.
#[wasm_bindgen]
pub fn compare_samplers(
    modes: usize,
    radius: f64,
    n: usize,
    euler_steps: usize,
    seed: u32,
) -> Result<Vec<f64>, JsError> {
    let c = compare(modes, radius, n, euler_steps, u64::from(seed)).map_err(js_err)?;
    let mut out = vec![c.euler_ed, c.exact_ed, n as f64];
    for set in [&c.noise, &c.euler, &c.exact] {
        out.extend(set.iter().flatten());
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn inference_gflops(decoder: f64, backbone: f64, nfe: u32) -> Result<f64, JsError> {
    budget(&BudgetSpec {
        decoder_gflops: decoder,
        backbone_gflops: backbone,
        nfe,
    })
    .map_err(js_err)
}
