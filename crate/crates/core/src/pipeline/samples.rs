//! Drawing, decoding and storing samples.

use std::io::{Read, Write};

use crate::dataset::FiniteSupportDataset;
use crate::error::{Error, Result};
use crate::rae::{DecoderNet, FrozenEncoder};
use crate::rng::LabRng;
use crate::solver::{
    format_f64, sample_flowmap, solve_pfode, step_times, FlowMap, Method, VelocityField,
};
use crate::tensor::Tensor;

/// Classes for `n` samples: a fixed class, or draws from the label
/// distribution of `data`.
pub fn draw_classes(
    n: usize,
    class: Option<usize>,
    data: &FiniteSupportDataset,
    rng: &mut LabRng,
) -> Vec<usize> {
    match class {
        Some(c) => vec![c; n],
        None => (0..n)
            .map(|_| data.labels[data.sample_index(rng)])
            .collect(),
    }
}

/// `n_steps` solver steps from noise at `t = 1` down to `t = 0`.
pub fn sample_teacher(
    net: &dyn VelocityField,
    noise: &Tensor,
    classes: &[usize],
    n_steps: usize,
    method: Method,
) -> Result<Tensor> {
    if noise.rows() == 0 {
        return Ok(noise.clone());
    }
    let traj = solve_pfode(net, noise, classes, 1.0, 0.0, n_steps, method)?;
    Ok(traj.endpoints().clone())
}

/// `nfe` flow-map jumps from `t = 1` to `t = 0`.
pub fn sample_map(
    net: &dyn FlowMap,
    noise: &Tensor,
    classes: &[usize],
    nfe: usize,
    midpoint: f64,
) -> Result<Tensor> {
    let times = step_times(nfe, midpoint)?;
    if noise.rows() == 0 {
        return Ok(noise.clone());
    }
    sample_flowmap(net, noise, &times, classes)
}

/// Maps latents back to data space with a trained decoder, or with the
/// exact inverse of a linear lift when no decoder is given.
pub fn decode_latents(
    z: &Tensor,
    encoder: &FrozenEncoder,
    decoder: Option<&DecoderNet>,
) -> Result<Tensor> {
    if let Some(d) = decoder {
        if z.rows() == 0 {
            return Ok(Tensor::zeros(0, d.output_dim()));
        }
        return d.decode_batch(z);
    }
    if encoder.spec().nonlinear {
        return Err(Error::Config(
            "a nonlinear lift needs a trained decoder to map samples back".into(),
        ));
    }
    let rows: Vec<Vec<f64>> = z
        .to_rows()
        .iter()
        .map(|r| encoder.project_back(r))
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Ok(Tensor::zeros(0, encoder.spec().input_dim));
    }
    Tensor::from_rows(&rows)
}

/// CSV with header `class,{prefix}0,{prefix}1,...`.
pub fn write_samples_csv<W: Write>(
    out: W,
    prefix: &str,
    classes: &[usize],
    x: &Tensor,
) -> Result<()> {
    if classes.len() != x.rows() {
        return Err(Error::dim("one class per sample row"));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["class".to_string()];
    header.extend((0..x.cols()).map(|k| format!("{prefix}{k}")));
    w.write_record(&header)?;
    for (i, c) in classes.iter().enumerate() {
        let mut rec = vec![c.to_string()];
        rec.extend(x.row_slice(i).iter().map(|v| format_f64(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a samples CSV back into `(classes, rows)`.
pub fn read_samples_csv<R: Read>(input: R) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(input);
    let (mut classes, mut rows) = (Vec::new(), Vec::new());
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 1;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if idx == 0 {
            if rec.get(0) != Some("class") {
                return Err(Error::Parse {
                    line,
                    message: "expected a header starting with `class`".into(),
                });
            }
            continue;
        }
        let bad = |m: String| Error::Parse { line, message: m };
        classes.push(
            rec[0]
                .parse()
                .map_err(|_| bad(format!("invalid class {:?}", &rec[0])))?,
        );
        rows.push(
            rec.iter()
                .skip(1)
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| bad(format!("invalid value {v:?}")))
                })
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    Ok((classes, rows))
}
