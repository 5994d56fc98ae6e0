//! Toy representation autoencoder: a frozen orthonormal lift from data space
//! into a wider latent space and a trained decoder back.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::FiniteSupportDataset;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::{Graph, Linear, ParamStore, Plain, Taped};
use crate::rng::LabRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Everything needed to rebuild a [`FrozenEncoder`] bit-for-bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub seed: u64,
    #[serde(default)]
    pub nonlinear: bool,
}

/// `z0 = L x` (optionally followed by `tanh`), with `L` a `latent x input`
/// matrix with orthonormal columns.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoder {
    spec: EncoderSpec,
    /// Stored transposed (`input x latent`) for row-major batches.
    lift_t: Tensor,
}

impl FrozenEncoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        if spec.latent_dim < spec.input_dim || spec.input_dim == 0 {
            return Err(Error::Config(format!(
                "lift needs latent_dim >= input_dim > 0, got {} -> {}",
                spec.input_dim, spec.latent_dim
            )));
        }
        let mut rng = LabRng::named(spec.seed, "encoder");
        let g = DMatrix::from_fn(spec.latent_dim, spec.input_dim, |_, _| rng.normal());
        let q = g.qr().q();
        let mut lift_t = Tensor::zeros(spec.input_dim, spec.latent_dim);
        for i in 0..spec.input_dim {
            for j in 0..spec.latent_dim {
                lift_t.data_mut()[i * spec.latent_dim + j] = q[(j, i)];
            }
        }
        Ok(Self { spec, lift_t })
    }

    pub fn spec(&self) -> EncoderSpec {
        self.spec
    }

    /// The lift `L` as a `latent x input` matrix.
    pub fn lift(&self) -> Tensor {
        self.lift_t.transpose()
    }

    pub fn fingerprint(&self) -> String {
        let mut p = ParamStore::new();
        p.push("lift", self.lift_t.clone());
        p.fingerprint()
    }

    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::dim(format!(
                "encoder expects width {}, got {}",
                self.spec.input_dim,
                x.cols()
            )));
        }
        let z = x.matmul(&self.lift_t)?;
        Ok(if self.spec.nonlinear {
            z.map(f64::tanh)
        } else {
            z
        })
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode_batch(&Tensor::row(x))?.into_data())
    }

    pub fn encode_dataset(&self, ds: &FiniteSupportDataset) -> Result<FiniteSupportDataset> {
        let z = self.encode_batch(&ds.atoms_tensor())?;
        FiniteSupportDataset::new(z.to_rows(), ds.weights.clone(), ds.labels.clone())
    }

    /// `L^T z`, the exact inverse of a linear lift on its range.
    pub fn project_back(&self, z: &[f64]) -> Result<Vec<f64>> {
        let zt = Tensor::row(z);
        if zt.cols() != self.spec.latent_dim {
            return Err(Error::dim("project_back: latent width mismatch"));
        }
        Ok(zt.matmul(&self.lift_t.transpose())?.into_data())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Width of the residual MLP; unused when `depth == 0`.
    #[serde(default = "default_decoder_hidden")]
    pub hidden: usize,
    /// Affine layers in the residual MLP; 0 gives a purely linear decoder.
    #[serde(default = "default_decoder_depth")]
    pub depth: usize,
    #[serde(default = "default_decoder_steps")]
    pub steps: usize,
    #[serde(default = "default_decoder_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_decoder_batch")]
    pub batch_size: usize,
    /// Held-out RMSE below which training counts as converged.
    #[serde(default = "default_decoder_threshold")]
    pub rmse_threshold: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_decoder_hidden() -> usize {
    64
}
fn default_decoder_depth() -> usize {
    3
}
fn default_decoder_steps() -> usize {
    5000
}
fn default_decoder_lr() -> f64 {
    1e-3
}
fn default_decoder_batch() -> usize {
    64
}
fn default_decoder_threshold() -> f64 {
    1e-3
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: default_decoder_hidden(),
            depth: default_decoder_depth(),
            steps: default_decoder_steps(),
            learning_rate: default_decoder_lr(),
            batch_size: default_decoder_batch(),
            rmse_threshold: default_decoder_threshold(),
            seed: 0,
        }
    }
}

/// `D(z) = z W + b + r(z)`: a linear readout plus a residual SiLU MLP whose
/// final layer starts at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderNet {
    latent_dim: usize,
    output_dim: usize,
    params: ParamStore,
    readout: Linear,
    residual: Vec<Linear>,
}

impl DecoderNet {
    pub fn new(
        latent_dim: usize,
        output_dim: usize,
        config: &DecoderConfig,
        rng: &mut LabRng,
    ) -> Self {
        let mut params = ParamStore::new();
        let w = params.push("readout.w", Tensor::zeros(latent_dim, output_dim));
        let b = params.push("readout.b", Tensor::zeros(1, output_dim));
        let readout = Linear {
            weight: w,
            bias: Some(b),
        };
        let mut residual = Vec::new();
        for i in 0..config.depth {
            let fan_in = if i == 0 { latent_dim } else { config.hidden };
            let last = i + 1 == config.depth;
            let fan_out = if last { output_dim } else { config.hidden };
            let data = (0..fan_in * fan_out)
                .map(|_| {
                    if last {
                        0.0
                    } else {
                        rng.normal() / (fan_in as f64).sqrt()
                    }
                })
                .collect();
            let w = params.push(
                format!("residual.{i}.w"),
                Tensor::matrix(fan_in, fan_out, data).expect("sized"),
            );
            let b = params.push(format!("residual.{i}.b"), Tensor::zeros(1, fan_out));
            residual.push(Linear {
                weight: w,
                bias: Some(b),
            });
        }
        Self {
            latent_dim,
            output_dim,
            params,
            readout,
            residual,
        }
    }

    pub fn from_params(
        latent_dim: usize,
        output_dim: usize,
        config: &DecoderConfig,
        params: ParamStore,
    ) -> Result<Self> {
        let mut d = Self::new(latent_dim, output_dim, config, &mut LabRng::new(0));
        if d.params.names() != params.names() {
            return Err(Error::Checkpoint("decoder layout mismatch".into()));
        }
        d.params = params;
        Ok(d)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn forward<G: Graph>(&self, g: &mut G, z: &G::Value) -> Result<G::Value> {
        let lin = g.linear(&self.params, self.readout, z)?;
        if self.residual.is_empty() {
            return Ok(lin);
        }
        let mut h = z.clone();
        let last = self.residual.len() - 1;
        for (i, layer) in self.residual.iter().enumerate() {
            h = g.linear(&self.params, *layer, &h)?;
            if i != last {
                h = g.silu(&h);
            }
        }
        g.add(&lin, &h)
    }

    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.latent_dim {
            return Err(Error::dim(format!(
                "decoder expects width {}, got {}",
                self.latent_dim,
                z.cols()
            )));
        }
        self.forward(&mut Plain, z)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode_batch(&Tensor::row(z))?.into_data())
    }

    fn decode_taped(&self, tape: &mut Tape, vars: &[Var], z: Var) -> Result<Var> {
        let mut g = Taped { tape, vars };
        self.forward(&mut g, &z)
    }

    /// Least-squares fit of the linear readout `[z, 1] -> x`.
    fn fit_readout(&mut self, z: &Tensor, x: &Tensor) -> Result<()> {
        let n = z.rows();
        let k = self.latent_dim + 1;
        let a = DMatrix::from_fn(n, k, |i, j| {
            if j < self.latent_dim {
                z.get(i, j)
            } else {
                1.0
            }
        });
        let b = DMatrix::from_fn(n, self.output_dim, |i, j| x.get(i, j));
        let svd = a.svd(true, true);
        let sol = svd
            .solve(&b, 1e-12)
            .map_err(|e| Error::Contract(format!("least squares failed: {e}")))?;
        let mut w = Tensor::zeros(self.latent_dim, self.output_dim);
        let mut bias = Tensor::zeros(1, self.output_dim);
        for j in 0..self.output_dim {
            for i in 0..self.latent_dim {
                w.data_mut()[i * self.output_dim + j] = sol[(i, j)];
            }
            bias.data_mut()[j] = sol[(self.latent_dim, j)];
        }
        let (wi, bi) = (
            self.readout.weight,
            self.readout.bias.expect("readout bias"),
        );
        self.params.tensors_mut()[wi] = w;
        self.params.tensors_mut()[bi] = bias;
        Ok(())
    }
}

/// Outcome of decoder training; a missed threshold is reported, not raised.
#[derive(Clone, Debug)]
pub struct DecoderReport {
    pub decoder: DecoderNet,
    pub train_rmse: f64,
    pub heldout_rmse: f64,
    pub converged: bool,
}

pub fn reconstruction_rmse(
    encoder: &FrozenEncoder,
    decoder: &DecoderNet,
    x: &Tensor,
) -> Result<f64> {
    let xhat = decoder.decode_batch(&encoder.encode_batch(x)?)?;
    Ok((xhat.sub(x)?.squared_norm() / x.rows() as f64).sqrt())
}

/// Fits the readout in closed form, then trains the residual MLP with Adam
/// on squared reconstruction error.
pub fn train_decoder(
    dataset: &FiniteSupportDataset,
    heldout: Option<&FiniteSupportDataset>,
    encoder: &FrozenEncoder,
    config: &DecoderConfig,
) -> Result<DecoderReport> {
    if dataset.is_empty() {
        return Err(Error::Config("decoder training needs data".into()));
    }
    let mut rng = LabRng::named(config.seed, "decoder");
    let x = dataset.atoms_tensor();
    let z = encoder.encode_batch(&x)?;
    let mut decoder = DecoderNet::new(z.cols(), x.cols(), config, &mut rng);
    decoder.fit_readout(&z, &x)?;

    if config.depth > 0 && config.steps > 0 {
        let readout_only = decoder.clone();
        let readout_rmse = reconstruction_rmse(encoder, &decoder, &x)?;
        let mut opt = Adam::new(&decoder.params, config.learning_rate, 0.9, 0.999, 1e-8);
        let batch = config.batch_size.min(x.rows()).max(1);
        for _ in 0..config.steps {
            let idx: Vec<usize> = (0..batch).map(|_| rng.index(x.rows())).collect();
            let zb = Tensor::from_rows(
                &idx.iter()
                    .map(|&i| z.row_slice(i).to_vec())
                    .collect::<Vec<_>>(),
            )?;
            let xb = Tensor::from_rows(
                &idx.iter()
                    .map(|&i| x.row_slice(i).to_vec())
                    .collect::<Vec<_>>(),
            )?;
            let mut tape = Tape::new();
            let vars: Vec<Var> = decoder
                .params
                .tensors()
                .iter()
                .map(|p| tape.leaf(p.clone()))
                .collect();
            let zv = tape.leaf(zb);
            let xv = tape.leaf(xb);
            let out = decoder.decode_taped(&mut tape, &vars, zv)?;
            let diff = tape.sub(out, xv)?;
            let sq = tape.squared_norm(diff);
            let loss = tape.scale(sq, 1.0 / batch as f64);
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars.iter().map(|v| grads.wrt(&tape, *v)).collect();
            opt.step(&mut decoder.params, &g)?;
        }
        if !decoder.params.all_finite() {
            return Err(Error::Divergence {
                stage: "decoder".into(),
                step: config.steps,
                reason: "non-finite decoder parameters".into(),
            });
        }
        // Adam noise can leave the fit slightly worse than the exact readout.
        if reconstruction_rmse(encoder, &decoder, &x)? > readout_rmse {
            decoder = readout_only;
        }
    }

    let train_rmse = reconstruction_rmse(encoder, &decoder, &x)?;
    let heldout_rmse = match heldout {
        Some(h) => reconstruction_rmse(encoder, &decoder, &h.atoms_tensor())?,
        None => train_rmse,
    };
    Ok(DecoderReport {
        converged: heldout_rmse <= config.rmse_threshold,
        decoder,
        train_rmse,
        heldout_rmse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> EncoderSpec {
        EncoderSpec {
            input_dim: 2,
            latent_dim: 16,
            seed: 7,
            nonlinear: false,
        }
    }

    #[test]
    fn lift_has_orthonormal_columns() {
        let e = FrozenEncoder::new(spec()).unwrap();
        let l = e.lift();
        let gram = l.transpose().matmul(&l).unwrap();
        let eye = Tensor::identity(2);
        assert!(gram.sub(&eye).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn linear_lift_is_an_isometry_and_zero_preserving() {
        let e = FrozenEncoder::new(spec()).unwrap();
        assert_eq!(e.encode(&[0.0, 0.0]).unwrap(), vec![0.0; 16]);
        let x = [1.3, -0.7];
        let z = e.encode(&x).unwrap();
        let nz: f64 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((nz - nx).abs() < 1e-12);
    }

    #[test]
    fn pseudo_inverse_recovers_input() {
        let e = FrozenEncoder::new(spec()).unwrap();
        let l = e.lift();
        let m = DMatrix::from_fn(16, 2, |i, j| l.get(i, j));
        let pinv = m.pseudo_inverse(1e-14).unwrap();
        let x = [0.25, 1.75];
        let z = e.encode(&x).unwrap();
        for i in 0..2 {
            let xi: f64 = (0..16).map(|j| pinv[(i, j)] * z[j]).sum();
            assert!((xi - x[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let e = FrozenEncoder::new(spec()).unwrap();
        assert!(matches!(
            e.encode(&[1.0, 2.0, 3.0]),
            Err(Error::Dimension(_))
        ));
        let d = DecoderNet::new(16, 2, &DecoderConfig::default(), &mut LabRng::new(0));
        assert!(matches!(d.decode(&[0.0; 3]), Err(Error::Dimension(_))));
    }

    #[test]
    fn linear_decoder_recovers_linear_lift_exactly() {
        let e = FrozenEncoder::new(spec()).unwrap();
        let ds = FiniteSupportDataset::ring(8, 2.0);
        let cfg = DecoderConfig {
            depth: 0,
            ..DecoderConfig::default()
        };
        let report = train_decoder(&ds, None, &e, &cfg).unwrap();
        assert!(report.train_rmse <= 1e-8, "rmse {}", report.train_rmse);
        assert!(report.converged);
    }

    #[test]
    fn nonlinear_lift_is_learned_by_the_residual() {
        let e = FrozenEncoder::new(EncoderSpec {
            nonlinear: true,
            ..spec()
        })
        .unwrap();
        // Far more points than readout parameters, so the readout alone
        // cannot interpolate the saturated lift.
        let mut rng = LabRng::new(11);
        let ds = FiniteSupportDataset::ring_mixture(8, 2.0, 0.2, 200, &mut rng);
        let cfg = DecoderConfig {
            steps: 800,
            learning_rate: 3e-3,
            ..DecoderConfig::default()
        };
        let linear_only = {
            let c = DecoderConfig {
                depth: 0,
                ..cfg.clone()
            };
            train_decoder(&ds, None, &e, &c).unwrap().train_rmse
        };
        let report = train_decoder(&ds, None, &e, &cfg).unwrap();
        assert!(
            report.train_rmse <= linear_only,
            "{} vs {}",
            report.train_rmse,
            linear_only
        );
    }
}
