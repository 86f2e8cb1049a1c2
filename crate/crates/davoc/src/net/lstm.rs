//! LSTM layers with explicit backpropagation through time.

use ndarray::{s, Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::{sigmoid, Param};

/// Stacked gate layout inside the `4H`-wide pre-activation vector:
/// input, forget, cell candidate, output.
const GATE_I: usize = 0;
const GATE_F: usize = 1;
const GATE_G: usize = 2;
const GATE_O: usize = 3;

#[derive(Clone)]
struct LstmCache {
    x: Array2<f64>,
    /// Post-activation gate values, `(T, 4H)`.
    gates: Array2<f64>,
    /// Cell states, `(T, H)`.
    c: Array2<f64>,
    /// Hidden states, `(T, H)`.
    h: Array2<f64>,
}

/// One-directional LSTM processing a `(T, in_dim)` sequence into `(T, H)`
/// hidden states, starting from zero state.
#[derive(Clone)]
pub struct Lstm {
    /// Input projection, `(4H, in_dim)`.
    pub w_ih: Param,
    /// Recurrent projection, `(4H, H)`.
    pub w_hh: Param,
    /// Gate bias, `(4H,)`.
    pub b: Param,
    pub hidden: usize,
    cache: Option<LstmCache>,
}

impl Lstm {
    pub fn new(name: &str, in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        let w_ih = Param::uniform2(&format!("{name}.w_ih"), 4 * hidden, in_dim, k, rng);
        let w_hh = Param::uniform2(&format!("{name}.w_hh"), 4 * hidden, hidden, k, rng);
        let mut b = Param::uniform1(&format!("{name}.b"), 4 * hidden, k, rng);
        // start with an open forget gate so early updates keep cell state
        for j in 0..hidden {
            b.value[GATE_F * hidden + j] = 1.0;
        }
        Lstm {
            w_ih,
            w_hh,
            b,
            hidden,
            cache: None,
        }
    }

    fn run(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let t_len = x.nrows();
        assert!(t_len > 0, "empty sequence");
        let h_dim = self.hidden;
        // one dgemm for every timestep's input projection
        let xp = x.dot(&self.w_ih.v2().t());
        let mut gates = Array2::zeros((t_len, 4 * h_dim));
        let mut c = Array2::zeros((t_len, h_dim));
        let mut h = Array2::zeros((t_len, h_dim));
        let mut h_prev = Array1::<f64>::zeros(h_dim);
        let mut c_prev = Array1::<f64>::zeros(h_dim);
        for t in 0..t_len {
            let mut a = xp.row(t).to_owned();
            a += &self.b.v1();
            a += &h_prev.dot(&self.w_hh.v2().t());
            for j in 0..h_dim {
                let i_g = sigmoid(a[GATE_I * h_dim + j]);
                let f_g = sigmoid(a[GATE_F * h_dim + j]);
                let g_g = a[GATE_G * h_dim + j].tanh();
                let o_g = sigmoid(a[GATE_O * h_dim + j]);
                gates[[t, GATE_I * h_dim + j]] = i_g;
                gates[[t, GATE_F * h_dim + j]] = f_g;
                gates[[t, GATE_G * h_dim + j]] = g_g;
                gates[[t, GATE_O * h_dim + j]] = o_g;
                let c_t = f_g * c_prev[j] + i_g * g_g;
                c[[t, j]] = c_t;
                h[[t, j]] = o_g * c_t.tanh();
            }
            c_prev.assign(&c.row(t));
            h_prev.assign(&h.row(t));
        }
        (gates, c, h)
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let (gates, c, h) = self.run(x);
        self.cache = Some(LstmCache {
            x: x.clone(),
            gates,
            c,
            h: h.clone(),
        });
        h
    }

    pub fn forward_inference(&self, x: &Array2<f64>) -> Array2<f64> {
        self.run(x).2
    }

    /// Backpropagate a gradient on the hidden-state sequence; accumulates
    /// parameter gradients and returns the gradient on the input sequence.
    pub fn backward(&mut self, dh_out: &Array2<f64>) -> Array2<f64> {
        let cache = self.cache.take().expect("forward before backward");
        let t_len = cache.h.nrows();
        let h_dim = self.hidden;
        assert_eq!(dh_out.dim(), (t_len, h_dim));

        let mut da_all = Array2::<f64>::zeros((t_len, 4 * h_dim));
        let mut dh_next = Array1::<f64>::zeros(h_dim);
        let mut dc_next = Array1::<f64>::zeros(h_dim);
        for t in (0..t_len).rev() {
            for j in 0..h_dim {
                let dh = dh_out[[t, j]] + dh_next[j];
                let i_g = cache.gates[[t, GATE_I * h_dim + j]];
                let f_g = cache.gates[[t, GATE_F * h_dim + j]];
                let g_g = cache.gates[[t, GATE_G * h_dim + j]];
                let o_g = cache.gates[[t, GATE_O * h_dim + j]];
                let tanh_c = cache.c[[t, j]].tanh();
                let do_g = dh * tanh_c;
                let dc = dh * o_g * (1.0 - tanh_c * tanh_c) + dc_next[j];
                let c_prev = if t > 0 { cache.c[[t - 1, j]] } else { 0.0 };
                dc_next[j] = dc * f_g;
                da_all[[t, GATE_I * h_dim + j]] = dc * g_g * i_g * (1.0 - i_g);
                da_all[[t, GATE_F * h_dim + j]] = dc * c_prev * f_g * (1.0 - f_g);
                da_all[[t, GATE_G * h_dim + j]] = dc * i_g * (1.0 - g_g * g_g);
                da_all[[t, GATE_O * h_dim + j]] = do_g * o_g * (1.0 - o_g);
            }
            dh_next = da_all.row(t).dot(&self.w_hh.v2());
        }

        let dw_ih = da_all.t().dot(&cache.x);
        self.w_ih.g2_mut().scaled_add(1.0, &dw_ih);
        if t_len > 1 {
            let dw_hh = da_all
                .slice(s![1.., ..])
                .t()
                .dot(&cache.h.slice(s![..t_len - 1, ..]));
            self.w_hh.g2_mut().scaled_add(1.0, &dw_hh);
        }
        let db = da_all.sum_axis(Axis(0));
        self.b
            .grad
            .as_slice_mut()
            .unwrap()
            .iter_mut()
            .zip(db.iter())
            .for_each(|(g, d)| *g += d);
        da_all.dot(&self.w_ih.v2())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.b]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w_ih, &self.w_hh, &self.b]
    }
}

fn reverse_rows(x: &Array2<f64>) -> Array2<f64> {
    x.slice(s![..;-1, ..]).to_owned()
}

/// Column-concatenate into a standard-layout array (`concatenate` would
/// hand back a layout `as_slice` rejects).
fn concat_cols(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    assert_eq!(a.nrows(), b.nrows());
    let mut out = Array2::zeros((a.nrows(), a.ncols() + b.ncols()));
    out.slice_mut(s![.., ..a.ncols()]).assign(a);
    out.slice_mut(s![.., a.ncols()..]).assign(b);
    out
}

/// Bidirectional LSTM: a forward and a time-reversed pass whose hidden
/// sequences are concatenated along the feature axis into `(T, 2H)`.
#[derive(Clone)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new(name: &str, in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        BiLstm {
            fwd: Lstm::new(&format!("{name}.fwd"), in_dim, hidden, rng),
            bwd: Lstm::new(&format!("{name}.bwd"), in_dim, hidden, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let hf = self.fwd.forward(x);
        let hb = reverse_rows(&self.bwd.forward(&reverse_rows(x)));
        concat_cols(&hf, &hb)
    }

    pub fn forward_inference(&self, x: &Array2<f64>) -> Array2<f64> {
        let hf = self.fwd.forward_inference(x);
        let hb = reverse_rows(&self.bwd.forward_inference(&reverse_rows(x)));
        concat_cols(&hf, &hb)
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let h_dim = self.fwd.hidden;
        let dhf = dy.slice(s![.., ..h_dim]).to_owned();
        let dhb = reverse_rows(&dy.slice(s![.., h_dim..]).to_owned());
        let dxf = self.fwd.backward(&dhf);
        let dxb = reverse_rows(&self.bwd.backward(&dhb));
        dxf + dxb
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.fwd.params_mut();
        ps.extend(self.bwd.params_mut());
        ps
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut ps = self.fwd.params();
        ps.extend(self.bwd.params());
        ps
    }
}
