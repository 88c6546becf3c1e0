use rand::Rng;

use super::{uniform, Module};
use crate::autodiff::{Graph, Param, Tensor, Var};
use crate::error::{Error, Result};

/// One gated recurrent unit layer (PyTorch gate layout: reset, update, new).
#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_ih: Param,
    pub w_hh: Param,
    pub b_ih: Param,
    pub b_hh: Param,
    hidden: usize,
}

impl GruCell {
    pub fn new(name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let b = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: Param::new(
                format!("{name}.w_ih"),
                uniform(&[3 * hidden, input], b, rng),
            ),
            w_hh: Param::new(
                format!("{name}.w_hh"),
                uniform(&[3 * hidden, hidden], b, rng),
            ),
            b_ih: Param::new(format!("{name}.b_ih"), uniform(&[3 * hidden], b, rng)),
            b_hh: Param::new(format!("{name}.b_hh"), uniform(&[3 * hidden], b, rng)),
            hidden,
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_ih.value.shape()[1]
    }

    /// `x: [B, input]`, `h: [B, hidden]` -> next hidden state `[B, hidden]`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        let hs = self.hidden;
        if g.value(x).cols() != self.input_size() || g.value(h).cols() != hs {
            return Err(Error::shape(
                "GruCell::step",
                format!(
                    "input {:?}, state {:?} for {}",
                    g.shape(x),
                    g.shape(h),
                    self.w_ih.name
                ),
            ));
        }
        let (w_ih, w_hh) = (g.param(&self.w_ih), g.param(&self.w_hh));
        let (b_ih, b_hh) = (g.param(&self.b_ih), g.param(&self.b_hh));
        let gi = g.matmul_t(x, w_ih, false, true)?;
        let gi = g.add_row(gi, b_ih)?;
        let gh = g.matmul_t(h, w_hh, false, true)?;
        let gh = g.add_row(gh, b_hh)?;

        let (i_r, h_r) = (g.slice_cols(gi, 0, hs)?, g.slice_cols(gh, 0, hs)?);
        let r = g.add(i_r, h_r)?;
        let r = g.sigmoid(r)?;
        let (i_z, h_z) = (g.slice_cols(gi, hs, hs)?, g.slice_cols(gh, hs, hs)?);
        let z = g.add(i_z, h_z)?;
        let z = g.sigmoid(z)?;
        let (i_n, h_n) = (g.slice_cols(gi, 2 * hs, hs)?, g.slice_cols(gh, 2 * hs, hs)?);
        let rh = g.mul(r, h_n)?;
        let n = g.add(i_n, rh)?;
        let n = g.tanh(n)?;
        // h' = (1 - z) * n + z * h = n + z * (h - n)
        let d = g.sub(h, n)?;
        let zd = g.mul(z, d)?;
        g.add(n, zd)
    }
}

impl Module for GruCell {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w_ih, &self.w_hh, &self.b_ih, &self.b_hh]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.w_ih,
            &mut self.w_hh,
            &mut self.b_ih,
            &mut self.b_hh,
        ]
    }
}

/// Where dropout is applied in a stacked GRU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DropoutPlacement {
    /// On the output of every layer except the last.
    #[default]
    BetweenLayers,
    /// On the output of every layer, including the last.
    AllOutputs,
}

impl DropoutPlacement {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::BetweenLayers => "between_layers",
            Self::AllOutputs => "all_outputs",
        }
    }
}

impl std::fmt::Display for DropoutPlacement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DropoutPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "between_layers" => Ok(Self::BetweenLayers),
            "all_outputs" => Ok(Self::AllOutputs),
            _ => Err(Error::Config(format!(
                "dropout placement is between_layers or all_outputs, got {s:?}"
            ))),
        }
    }
}

/// Recurrent state of a stacked GRU: one `[B, H]` tensor per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GruState {
    pub hidden: Vec<Tensor>,
}

impl GruState {
    pub fn zeros(layers: usize, batch: usize, hidden: usize) -> Self {
        Self {
            hidden: vec![Tensor::zeros(&[batch, hidden]); layers],
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.hidden.iter().map(|t| g.constant(t.clone())).collect()
    }

    pub fn read(g: &Graph, vars: &[Var]) -> Self {
        Self {
            hidden: vars.iter().map(|v| g.value(*v).clone()).collect(),
        }
    }
}

/// Stacked GRU.
#[derive(Debug, Clone)]
pub struct Gru {
    pub cells: Vec<GruCell>,
    pub hidden: usize,
    pub dropout: f64,
    pub placement: DropoutPlacement,
}

impl Gru {
    pub fn new(
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let cells = (0..layers)
            .map(|l| {
                GruCell::new(
                    &format!("{name}.{l}"),
                    if l == 0 { input } else { hidden },
                    hidden,
                    rng,
                )
            })
            .collect();
        Self {
            cells,
            hidden,
            dropout,
            placement: DropoutPlacement::default(),
        }
    }

    pub fn layers(&self) -> usize {
        self.cells.len()
    }

    pub fn input_size(&self) -> usize {
        self.cells[0].input_size()
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> Vec<Var> {
        GruState::zeros(self.layers(), batch, self.hidden).bind(g)
    }

    /// One time step through all layers; returns the top-layer output and
    /// the new per-layer state.
    pub fn step(&self, g: &mut Graph, x: Var, state: &[Var]) -> Result<(Var, Vec<Var>)> {
        if state.len() != self.layers() {
            return Err(Error::shape(
                "Gru::step",
                format!("{} state tensors for {} layers", state.len(), self.layers()),
            ));
        }
        let mut input = x;
        let mut next = Vec::with_capacity(self.layers());
        for (l, cell) in self.cells.iter().enumerate() {
            let h = cell.step(g, input, state[l])?;
            next.push(h);
            let last = l + 1 == self.layers();
            input = if !last || self.placement == DropoutPlacement::AllOutputs {
                g.dropout(h, self.dropout)?
            } else {
                h
            };
        }
        Ok((input, next))
    }

    /// Runs `inputs` in order from `state`, returning per-step outputs.
    pub fn unroll(
        &self,
        g: &mut Graph,
        inputs: &[Var],
        state: &[Var],
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let mut s = state.to_vec();
        let mut out = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (y, ns) = self.step(g, *x, &s)?;
            out.push(y);
            s = ns;
        }
        Ok((out, s))
    }
}

impl Module for Gru {
    fn params(&self) -> Vec<&Param> {
        self.cells.iter().flat_map(|c| c.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.cells.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::gradcheck_params;

    fn inputs(n: usize, batch: usize, width: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| uniform(&[batch, width], 1.0, &mut rng))
            .collect()
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut gru = Gru::new("g", 3, 5, 2, 0.0, &mut rng);
        for p in gru.params_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let mut g = Graph::new();
        let s = gru.zero_state(&mut g, 2);
        let x = g.constant(inputs(1, 2, 3, 4).remove(0));
        let (y, _) = gru.step(&mut g, x, &s).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn threaded_state_matches_unroll() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gru = Gru::new("g", 3, 6, 2, 0.2, &mut rng);
        let xs = inputs(5, 1, 3, 5);

        let mut g = Graph::new();
        let s = gru.zero_state(&mut g, 1);
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let (batch_out, _) = gru.unroll(&mut g, &vars, &s).unwrap();
        let batch: Vec<Tensor> = batch_out.iter().map(|v| g.value(*v).clone()).collect();

        let mut state = GruState::zeros(2, 1, 6);
        for (t, x) in xs.iter().enumerate() {
            let mut g = Graph::new();
            let s = state.bind(&mut g);
            let xv = g.constant(x.clone());
            let (y, ns) = gru.step(&mut g, xv, &s).unwrap();
            assert_eq!(g.value(y), &batch[t]);
            state = GruState::read(&g, &ns);
        }
    }

    #[test]
    fn gradient_through_ten_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gru = Gru::new("g", 3, 4, 2, 0.0, &mut rng);
        let xs = inputs(10, 2, 3, 6);
        let r = gradcheck_params(
            &mut gru,
            |g, m| {
                let s = m.zero_state(g, 2);
                let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
                let (out, _) = m.unroll(g, &vars, &s)?;
                let all = g.concat_rows(&out)?;
                let sq = g.mul(all, all)?;
                let s1 = g.sum(sq)?;
                let last = g.sum(*out.last().unwrap())?;
                g.add(s1, last)
            },
            1e-5,
            1e-4,
            usize::MAX,
        )
        .unwrap();
        assert!(r.passed(), "{:?}", r.max_rel_error);
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gru = Gru::new("g", 3, 4, 2, 0.0, &mut rng);
        let mut g = Graph::new();
        let s = gru.zero_state(&mut g, 1);
        let x = g.constant(Tensor::zeros(&[1, 5]));
        assert!(gru.step(&mut g, x, &s).is_err());
        let x = g.constant(Tensor::zeros(&[1, 3]));
        assert!(gru.step(&mut g, x, &s[..1]).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let a = Gru::new("g", 3, 4, 2, 0.2, &mut ChaCha8Rng::seed_from_u64(9));
        let b = Gru::new("g", 3, 4, 2, 0.2, &mut ChaCha8Rng::seed_from_u64(9));
        let run = |gru: &Gru| {
            let mut g = Graph::training(11);
            let s = gru.zero_state(&mut g, 1);
            let x = g.constant(Tensor::full(&[1, 3], 0.5));
            let (y, _) = gru.step(&mut g, x, &s).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(&a), run(&b));
    }

    #[test]
    fn placement_names_round_trip() {
        for p in [
            DropoutPlacement::BetweenLayers,
            DropoutPlacement::AllOutputs,
        ] {
            assert_eq!(p.to_string().parse::<DropoutPlacement>().unwrap(), p);
        }
        assert!("sometimes".parse::<DropoutPlacement>().is_err());
    }
}
