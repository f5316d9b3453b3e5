//! Central-finite-difference gradient checking. Used by the test suites;
//! heavy checks instantiate the graph at f64.

use alloc::vec::Vec;

use super::{GradError, Real, Tape, Tensor, VarId};

/// Knobs for [`central_diff_check`].
#[derive(Clone, Copy, Debug)]
pub struct FdCheck {
    /// Central difference step (applied in the input's own precision).
    pub h: f64,
    /// Relative-error denominator floor; keeps finite-difference noise on
    /// near-zero gradients from dominating the report.
    pub rel_floor: f64,
    /// Cap on coordinates checked per input tensor (evenly spaced).
    pub max_coords: usize,
}

impl FdCheck {
    /// Defaults for f64 checks: h = 1e-6, pass bar rel < 1e-5.
    pub fn f64_default() -> Self {
        FdCheck {
            h: 1e-6,
            rel_floor: 1e-3,
            max_coords: usize::MAX,
        }
    }

    /// Defaults for f32 checks: h = 1e-2, pass bar rel < 1e-3.
    pub fn f32_default() -> Self {
        FdCheck {
            h: 1e-2,
            rel_floor: 1e-1,
            max_coords: usize::MAX,
        }
    }

    pub fn with_max_coords(mut self, n: usize) -> Self {
        self.max_coords = n;
        self
    }
}

/// Worst observed deviation between analytic and finite-difference grads.
#[derive(Clone, Copy, Debug, Default)]
pub struct FdReport {
    pub max_rel: f64,
    pub max_abs: f64,
    pub checked: usize,
}

/// Compare analytic gradients of `build`'s scalar output against central
/// finite differences over every (sampled) input coordinate.
///
/// `build` must be a pure function of the leaf values: it is re-invoked on
/// a fresh tape for every probe.
pub fn central_diff_check<E: Real>(
    inputs: &[Tensor<E>],
    cfg: FdCheck,
    build: &mut dyn FnMut(&mut Tape<E>, &[VarId]) -> Result<VarId, GradError>,
) -> Result<FdReport, GradError> {
    let eval = |tensors: &[Tensor<E>],
                build: &mut dyn FnMut(&mut Tape<E>, &[VarId]) -> Result<VarId, GradError>|
     -> Result<f64, GradError> {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), false))
            .collect::<Result<_, _>>()?;
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).scalar_value().to_f64())
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<_, _>>()?;
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<E>> = ids.iter().map(|&id| grads.tensor(&tape, id)).collect();
    drop(tape);

    let mut report = FdReport::default();
    let mut probe: Vec<Tensor<E>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let len = input.len();
        let coords: Vec<usize> = if len <= cfg.max_coords {
            (0..len).collect()
        } else {
            let step = len as f64 / cfg.max_coords as f64;
            (0..cfg.max_coords)
                .map(|i| ((i as f64 + 0.5) * step) as usize)
                .collect()
        };
        for &ci in &coords {
            let base = input.data()[ci].to_f64();
            let h = cfg.h;
            let mut bump = |delta: f64, probe: &mut Vec<Tensor<E>>| {
                let mut t = input.clone();
                t.data_mut()[ci] = E::from_f64(base + delta);
                probe[ti] = t;
            };
            bump(h, &mut probe);
            let fp = eval(&probe, build)?;
            bump(-h, &mut probe);
            let fm = eval(&probe, build)?;
            probe[ti] = input.clone();

            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[ti].data()[ci].to_f64();
            let abs = (an - fd).abs();
            let rel = abs / an.abs().max(fd.abs()).max(cfg.rel_floor);
            if rel > report.max_rel {
                report.max_rel = rel;
            }
            if abs > report.max_abs {
                report.max_abs = abs;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
