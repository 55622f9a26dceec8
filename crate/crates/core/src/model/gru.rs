use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gated recurrent unit, `h_t = (1 − z) ⊙ h_{t−1} + z ⊙ ĥ`.
///
/// Input weights are `[D, input]`, recurrent weights `[D, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Vec<f64>,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Vec<f64>,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

/// Input-side projections `W x + b` for the three gates.
#[derive(Clone, Copy, Debug)]
pub(crate) struct GateInputs {
    pub z: Var,
    pub r: Var,
    pub h: Var,
}

impl GruCell {
    pub fn hidden_dim(&self) -> usize {
        self.u_z.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.shape()[1]
    }

    /// A single step on plain vectors.
    pub fn step(&self, input: &[f64], h_prev: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() || h_prev.len() != self.hidden_dim() {
            return Err(Error::shape(
                "gru_step",
                &[&[input.len()], &[h_prev.len()], &[self.hidden_dim(), self.input_dim()]],
            ));
        }
        let mut tape = Tape::new();
        let vars = self.constants(&mut tape);
        let x = tape.constant(Tensor::new(vec![1, input.len()], input.to_vec())?);
        let h = tape.constant(Tensor::new(vec![1, h_prev.len()], h_prev.to_vec())?);
        let gates = project_inputs(&mut tape, &vars, x)?;
        let out = gru_step_on_tape(&mut tape, &vars, gates, h)?;
        Ok(tape.value(out).data().to_vec())
    }

    fn constants(&self, tape: &mut Tape) -> GruVars {
        let mut c = |t: &Tensor| tape.constant(t.clone());
        let (w_z, u_z, w_r, u_r, w_h, u_h) = (c(&self.w_z), c(&self.u_z), c(&self.w_r), c(&self.u_r), c(&self.w_h), c(&self.u_h));
        GruVars {
            w_z,
            u_z,
            b_z: tape.constant(Tensor::vector(self.b_z.clone())),
            w_r,
            u_r,
            b_r: tape.constant(Tensor::vector(self.b_r.clone())),
            w_h,
            u_h,
            b_h: tape.constant(Tensor::vector(self.b_h.clone())),
        }
    }
}

/// `x: [R, input] → three [R, D]` projections, computed once for every
/// timestep of a batch.
pub(crate) fn project_inputs(tape: &mut Tape, p: &GruVars, x: Var) -> Result<GateInputs> {
    let z = tape.matmul_nt(x, p.w_z)?;
    let r = tape.matmul_nt(x, p.w_r)?;
    let h = tape.matmul_nt(x, p.w_h)?;
    Ok(GateInputs {
        z: tape.add_bias(z, p.b_z)?,
        r: tape.add_bias(r, p.b_r)?,
        h: tape.add_bias(h, p.b_h)?,
    })
}

pub(crate) fn gru_step_on_tape(tape: &mut Tape, p: &GruVars, x: GateInputs, h_prev: Var) -> Result<Var> {
    let uz = tape.matmul_nt(h_prev, p.u_z)?;
    let z = tape.add(x.z, uz)?;
    let z = tape.sigmoid(z)?;
    let ur = tape.matmul_nt(h_prev, p.u_r)?;
    let r = tape.add(x.r, ur)?;
    let r = tape.sigmoid(r)?;
    let rh = tape.mul(r, h_prev)?;
    let uh = tape.matmul_nt(rh, p.u_h)?;
    let cand = tape.add(x.h, uh)?;
    let cand = tape.tanh(cand)?;
    let keep = tape.one_minus(z)?;
    let kept = tape.mul(keep, h_prev)?;
    let fresh = tape.mul(z, cand)?;
    tape.add(kept, fresh)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// One hidden ReLU layer, scalar linear output: `[B, D] → [B, 1]`.
pub(crate) fn head_on_tape(tape: &mut Tape, p: &HeadVars, h: Var) -> Result<Var> {
    let hidden = tape.matmul_nt(h, p.w1)?;
    let hidden = tape.add_bias(hidden, p.b1)?;
    let hidden = tape.relu(hidden)?;
    let out = tape.matmul_nt(hidden, p.w2)?;
    tape.add_bias(out, p.b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_cell(input: usize, hidden: usize) -> GruCell {
        GruCell {
            w_z: Tensor::zeros(&[hidden, input]),
            u_z: Tensor::zeros(&[hidden, hidden]),
            b_z: vec![0.0; hidden],
            w_r: Tensor::zeros(&[hidden, input]),
            u_r: Tensor::zeros(&[hidden, hidden]),
            b_r: vec![0.0; hidden],
            w_h: Tensor::zeros(&[hidden, input]),
            u_h: Tensor::zeros(&[hidden, hidden]),
            b_h: vec![0.0; hidden],
        }
    }

    #[test]
    fn zero_cell_halves_state() {
        let cell = zero_cell(2, 1);
        assert_eq!(cell.step(&[0.3, -0.4], &[1.0]).unwrap(), vec![0.5]);
    }

    #[test]
    fn zero_state_and_zero_candidate_stay_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cell = zero_cell(3, 2);
        for t in [&mut cell.w_z, &mut cell.w_r, &mut cell.u_z, &mut cell.u_r, &mut cell.u_h] {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        assert_eq!(cell.step(&[0.2, 0.1, -0.5], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn step_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (ni, d) = (3, 2);
        let mut cell = zero_cell(ni, d);
        for t in [&mut cell.w_z, &mut cell.w_r, &mut cell.w_h, &mut cell.u_z, &mut cell.u_r, &mut cell.u_h] {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        for b in [&mut cell.b_z, &mut cell.b_r, &mut cell.b_h] {
            b.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        let x = [0.4, -0.9, 1.3];
        let h = [0.25, -0.6];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let lin = |w: &Tensor, u: &Tensor, b: &[f64], hh: &[f64], i: usize| {
            let mut s = b[i];
            for c in 0..ni {
                s += w.data()[i * ni + c] * x[c];
            }
            for c in 0..d {
                s += u.data()[i * d + c] * hh[c];
            }
            s
        };
        let z: Vec<f64> = (0..d).map(|i| sig(lin(&cell.w_z, &cell.u_z, &cell.b_z, &h, i))).collect();
        let r: Vec<f64> = (0..d).map(|i| sig(lin(&cell.w_r, &cell.u_r, &cell.b_r, &h, i))).collect();
        let rh: Vec<f64> = (0..d).map(|i| r[i] * h[i]).collect();
        let cand: Vec<f64> = (0..d).map(|i| lin(&cell.w_h, &cell.u_h, &cell.b_h, &rh, i).tanh()).collect();
        let expect: Vec<f64> = (0..d).map(|i| (1.0 - z[i]) * h[i] + z[i] * cand[i]).collect();
        let got = cell.step(&x, &h).unwrap();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-14);
        }
    }
}
