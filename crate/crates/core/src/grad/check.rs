use std::io::Write;

use crate::tensor::{Precision, Tensor};

use super::{AdjointFault, GradError, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Corrupts the analytic pass; the check is then expected to fail.
    pub fault: Option<AdjointFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            tolerance: 1e-4,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }

    pub fn param_count(&self) -> usize {
        self.entries.len()
    }

    /// Largest relative error of each parameter tensor, in registration order.
    pub fn per_param(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for e in &self.entries {
            match out.last_mut() {
                Some((name, worst)) if *name == e.param => *worst = worst.max(e.rel_err),
                _ => out.push((e.param.clone(), e.rel_err)),
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["param", "index", "analytic", "numeric", "rel_err"])?;
        for e in &self.entries {
            wr.write_record([
                e.param.clone(),
                e.index.to_string(),
                format!("{:e}", e.analytic),
                format!("{:e}", e.numeric),
                format!("{:e}", e.rel_err),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares tape gradients with central differences for every parameter element.
///
/// `build` records a scalar loss on the given tape from the registered parameter
/// handles (same order as `params`). All arithmetic runs in 64-bit mode.
pub fn gradcheck<F>(params: &[(String, Tensor)], opts: GradCheckOptions, build: F) -> Result<GradReport, GradError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, GradError>,
{
    gradcheck_with(params, opts, build)
}

/// [`gradcheck`] for loss builders with their own error type.
pub fn gradcheck_with<F, E>(params: &[(String, Tensor)], opts: GradCheckOptions, mut build: F) -> Result<GradReport, E>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<GradError>,
{
    let params: Vec<(String, Tensor)> = params
        .iter()
        .map(|(n, t)| (n.clone(), t.to_precision(Precision::F64)))
        .collect();

    let mut eval = |values: &[(String, Tensor)], fault: Option<AdjointFault>| -> Result<(Tape, Var), E> {
        let mut tape = Tape::new(Precision::F64);
        if let Some(f) = fault {
            tape = tape.with_fault(f);
        }
        let vars: Vec<Var> = values.iter().map(|(n, t)| tape.param(n.clone(), t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        if tape.value(loss).len() != 1 {
            return Err(GradError::NonScalarLoss(tape.value(loss).shape().to_vec()).into());
        }
        Ok((tape, loss))
    };

    let (tape, loss) = eval(&params, opts.fault)?;
    let grads = tape.backward(loss, &Tensor::scalar(1.0, Precision::F64))?;
    let analytic: Vec<Tensor> = tape.params().iter().map(|(_, v)| grads.get_or_zero(&tape, *v)).collect();

    let mut entries = Vec::new();
    let mut probe = params.clone();
    for (pi, (name, value)) in params.iter().enumerate() {
        for i in 0..value.len() {
            let mut at = |delta: f64, probe: &mut Vec<(String, Tensor)>| -> Result<f64, E> {
                let mut data = value.data().to_vec();
                data[i] += delta;
                probe[pi].1 = Tensor::new(value.shape().to_vec(), data).map_err(GradError::from)?;
                let (t, l) = eval(probe, None)?;
                Ok(t.value(l).data()[0])
            };
            let plus = at(opts.step, &mut probe)?;
            let minus = at(-opts.step, &mut probe)?;
            probe[pi].1 = value.clone();
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[pi].data()[i];
            entries.push(GradCheckEntry {
                param: name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric),
            });
        }
    }
    Ok(GradReport {
        entries,
        tolerance: opts.tolerance,
    })
}
