use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::tape::{Tape, Var};
use super::Real;
use crate::error::{Error, Result};

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

/// Which rows of a batched recurrent step hold a real token.
pub type StepMask = Vec<bool>;

/// Tape handles for one LSTM direction. Gate blocks are ordered i, f, g, o.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    /// `d_in × 4s`
    pub w_input: Var,
    /// `s × 4s`
    pub w_hidden: Var,
    /// `1 × 4s`
    pub bias: Var,
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<F: Real> Tape<F> {
    /// `x·W + b` with `b` broadcast over rows.
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.ncols() != wv.nrows() || bv.dim() != (1, wv.ncols()) {
            return shape_err(format!(
                "affine: x {:?}, W {:?}, b {:?}",
                xv.dim(),
                wv.dim(),
                bv.dim()
            ));
        }
        let y = xv.dot(&*wv) + &*bv;
        Ok(self.push_op(
            y,
            &[x, w, b],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.dot(&wv.t())),
                    needs[1].then(|| xv.t().dot(g)),
                    needs[2].then(|| g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                ]
            }),
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return shape_err(format!("add: {:?} vs {:?}", av.dim(), bv.dim()));
        }
        let y = &*av + &*bv;
        Ok(self.push_op(
            y,
            &[a, b],
            Box::new(|g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]),
        ))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&self, x: Var, factor: Array2<F>) -> Result<Var> {
        let xv = self.value(x);
        if xv.dim() != factor.dim() {
            return shape_err(format!("mul_const: {:?} vs {:?}", xv.dim(), factor.dim()));
        }
        let y = &*xv * &factor;
        Ok(self.push_op(y, &[x], Box::new(move |g, _| vec![Some(g * &factor)])))
    }

    /// Sum of all entries as a `1 × 1` value.
    pub fn sum(&self, x: Var) -> Var {
        let xv = self.value(x);
        let dim = xv.dim();
        let total = xv.sum();
        self.push_op(
            Array2::from_elem((1, 1), total),
            &[x],
            Box::new(move |g, _| vec![Some(Array2::from_elem(dim, g[[0, 0]]))]),
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Rc<Array2<F>>> = parts.iter().map(|&p| self.value(p)).collect();
        let rows = values.first().map_or(0, |v| v.nrows());
        if values.is_empty() || values.iter().any(|v| v.nrows() != rows) {
            return shape_err("concat_cols: row counts differ".into());
        }
        let views: Vec<ArrayView2<F>> = values.iter().map(|v| v.view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("checked shapes");
        let widths: Vec<usize> = values.iter().map(|v| v.ncols()).collect();
        Ok(self.push_op(
            y,
            parts,
            Box::new(move |g, needs| {
                let mut start = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &need)| {
                        let part = need.then(|| g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                        part
                    })
                    .collect()
            }),
        ))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Rc<Array2<F>>> = parts.iter().map(|&p| self.value(p)).collect();
        let cols = values.first().map_or(0, |v| v.ncols());
        if values.is_empty() || values.iter().any(|v| v.ncols() != cols) {
            return shape_err("concat_rows: column counts differ".into());
        }
        let views: Vec<ArrayView2<F>> = values.iter().map(|v| v.view()).collect();
        let y = ndarray::concatenate(Axis(0), &views).expect("checked shapes");
        let heights: Vec<usize> = values.iter().map(|v| v.nrows()).collect();
        Ok(self.push_op(
            y,
            parts,
            Box::new(move |g, needs| {
                let mut start = 0;
                heights
                    .iter()
                    .zip(needs)
                    .map(|(&h, &need)| {
                        let part = need.then(|| g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                        part
                    })
                    .collect()
            }),
        ))
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        if start + len > rows {
            return shape_err(format!("slice_rows {start}+{len} of {rows}"));
        }
        let y = xv.slice(s![start..start + len, ..]).to_owned();
        Ok(self.push_op(
            y,
            &[x],
            Box::new(move |g, _| {
                let mut full = Array2::zeros((rows, cols));
                full.slice_mut(s![start..start + len, ..]).assign(g);
                vec![Some(full)]
            }),
        ))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        if start + len > cols {
            return shape_err(format!("slice_cols {start}+{len} of {cols}"));
        }
        let y = xv.slice(s![.., start..start + len]).to_owned();
        Ok(self.push_op(
            y,
            &[x],
            Box::new(move |g, _| {
                let mut full = Array2::zeros((rows, cols));
                full.slice_mut(s![.., start..start + len]).assign(g);
                vec![Some(full)]
            }),
        ))
    }

    /// Row lookup: output row `r` is `table[rows[r]]`, or zeros for `None`.
    pub fn gather_rows(&self, table: Var, rows: &[Option<usize>]) -> Result<Var> {
        let tv = self.value(table);
        let (n, d) = tv.dim();
        if let Some(bad) = rows.iter().flatten().find(|&&r| r >= n) {
            return shape_err(format!("gather_rows: index {bad} out of {n}"));
        }
        let mut y = Array2::zeros((rows.len(), d));
        for (out, row) in y.outer_iter_mut().zip(rows) {
            if let Some(r) = row {
                let mut out = out;
                out.assign(&tv.row(*r));
            }
        }
        let rows = rows.to_vec();
        Ok(self.push_op(
            y,
            &[table],
            Box::new(move |g, _| {
                let mut dt = Array2::zeros((n, d));
                for (gr, row) in g.outer_iter().zip(&rows) {
                    if let Some(r) = row {
                        let mut target = dt.row_mut(*r);
                        target += &gr;
                    }
                }
                vec![Some(dt)]
            }),
        ))
    }

    /// Valid 1-D convolution over each character segment followed by a max
    /// over positions. `chars` stacks the embedded characters of all words;
    /// `segments[i] = (start, len)` selects word `i`. `filters` is
    /// `(kernel·d_c) × f` with window rows flattened in order. Output is
    /// `segments.len() × f`. Ties in the max go to the lowest position.
    pub fn conv1d_maxpool(
        &self,
        chars: Var,
        segments: &[(usize, usize)],
        filters: Var,
        bias: Var,
        kernel: usize,
    ) -> Result<Var> {
        let (cv, fv, bv) = (self.value(chars), self.value(filters), self.value(bias));
        let (n_chars, d_c) = cv.dim();
        let n_filters = fv.ncols();
        if kernel == 0 || fv.nrows() != kernel * d_c || bv.dim() != (1, n_filters) {
            return shape_err(format!(
                "conv1d: chars {:?}, filters {:?}, bias {:?}, kernel {kernel}",
                cv.dim(),
                fv.dim(),
                bv.dim()
            ));
        }
        if let Some(&(start, len)) = segments.iter().find(|&&(s, l)| l < kernel || s + l > n_chars) {
            return shape_err(format!(
                "conv1d: segment ({start}, {len}) needs at least {kernel} of {n_chars} rows"
            ));
        }

        // one im2col row per window, windows of a segment are contiguous
        let n_windows: usize = segments.iter().map(|&(_, l)| l - kernel + 1).sum();
        let mut cols = Array2::zeros((n_windows, kernel * d_c));
        let mut window_char = Vec::with_capacity(n_windows);
        let mut w = 0;
        for &(start, len) in segments {
            for p in 0..=len - kernel {
                let first = start + p;
                let flat = cv.slice(s![first..first + kernel, ..]);
                cols.row_mut(w)
                    .iter_mut()
                    .zip(flat.iter())
                    .for_each(|(dst, &src)| *dst = src);
                window_char.push(first);
                w += 1;
            }
        }
        let responses = cols.dot(&*fv) + &*bv;

        let mut y = Array2::zeros((segments.len(), n_filters));
        let mut argmax = vec![0usize; segments.len() * n_filters];
        let mut offset = 0;
        for (i, &(_, len)) in segments.iter().enumerate() {
            let n = len - kernel + 1;
            for j in 0..n_filters {
                let mut best = offset;
                for p in offset + 1..offset + n {
                    if responses[[p, j]] > responses[[best, j]] {
                        best = p;
                    }
                }
                y[[i, j]] = responses[[best, j]];
                argmax[i * n_filters + j] = best;
            }
            offset += n;
        }

        let cols = Rc::new(cols);
        Ok(self.push_op(
            y,
            &[chars, filters, bias],
            Box::new(move |g, needs| {
                let mut dresp = Array2::zeros((n_windows, n_filters));
                for i in 0..g.nrows() {
                    for j in 0..n_filters {
                        dresp[[argmax[i * n_filters + j], j]] += g[[i, j]];
                    }
                }
                let dchars = needs[0].then(|| {
                    let dcols = dresp.dot(&fv.t());
                    let mut dc = Array2::zeros((n_chars, d_c));
                    for (row, &first) in dcols.outer_iter().zip(&window_char) {
                        for k in 0..kernel {
                            let mut target = dc.row_mut(first + k);
                            target += &row.slice(s![k * d_c..(k + 1) * d_c]);
                        }
                    }
                    dc
                });
                vec![
                    dchars,
                    needs[1].then(|| cols.t().dot(&dresp)),
                    needs[2].then(|| g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                ]
            }),
        ))
    }

    /// One fused LSTM step over a batch.
    ///
    /// `x_proj` is `B × 4s` (input already multiplied by the input weights and
    /// biased), `state` is `B × 2s` holding `[h | c]`. Rows whose mask entry is
    /// false carry their previous state through unchanged.
    pub fn lstm_step(&self, x_proj: Var, state: Var, w_hidden: Var, mask: &[bool]) -> Result<Var> {
        let (xv, sv, wv) = (self.value(x_proj), self.value(state), self.value(w_hidden));
        let (batch, two_s) = sv.dim();
        let size = two_s / 2;
        if two_s % 2 != 0
            || xv.dim() != (batch, 4 * size)
            || wv.dim() != (size, 4 * size)
            || mask.len() != batch
        {
            return shape_err(format!(
                "lstm_step: x_proj {:?}, state {:?}, W_h {:?}, mask {}",
                xv.dim(),
                sv.dim(),
                wv.dim(),
                mask.len()
            ));
        }
        let h_prev = sv.slice(s![.., ..size]);
        let c_prev = sv.slice(s![.., size..]).to_owned();
        let mut gates = h_prev.dot(&*wv) + &*xv;
        for mut row in gates.outer_iter_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = if (2 * size..3 * size).contains(&k) {
                    v.tanh()
                } else {
                    sigmoid(*v)
                };
            }
        }
        let i_g = gates.slice(s![.., ..size]);
        let f_g = gates.slice(s![.., size..2 * size]);
        let g_g = gates.slice(s![.., 2 * size..3 * size]);
        let o_g = gates.slice(s![.., 3 * size..]);
        let c = &f_g * &c_prev + &i_g * &g_g;
        let tanh_c = c.mapv(F::tanh);
        let h = &o_g * &tanh_c;

        let mut out = Array2::zeros((batch, two_s));
        for (b, &real) in mask.iter().enumerate() {
            if real {
                out.slice_mut(s![b, ..size]).assign(&h.row(b));
                out.slice_mut(s![b, size..]).assign(&c.row(b));
            } else {
                out.row_mut(b).assign(&sv.row(b));
            }
        }

        let mask = mask.to_vec();
        Ok(self.push_op(
            out,
            &[x_proj, state, w_hidden],
            Box::new(move |g, needs| {
                let dh_all = g.slice(s![.., ..size]);
                let dc_all = g.slice(s![.., size..]);
                let mut dgates = Array2::<F>::zeros((batch, 4 * size));
                let mut dstate = Array2::<F>::zeros((batch, two_s));
                for b in 0..batch {
                    if !mask[b] {
                        dstate.row_mut(b).assign(&g.row(b));
                        continue;
                    }
                    for k in 0..size {
                        let (i, f, gg, o) = (
                            gates[[b, k]],
                            gates[[b, size + k]],
                            gates[[b, 2 * size + k]],
                            gates[[b, 3 * size + k]],
                        );
                        let tc = tanh_c[[b, k]];
                        let dh = dh_all[[b, k]];
                        let dc = dc_all[[b, k]] + dh * o * (F::one() - tc * tc);
                        let d_o = dh * tc;
                        let d_i = dc * gg;
                        let d_g = dc * i;
                        let d_f = dc * c_prev[[b, k]];
                        dgates[[b, k]] = d_i * i * (F::one() - i);
                        dgates[[b, size + k]] = d_f * f * (F::one() - f);
                        dgates[[b, 2 * size + k]] = d_g * (F::one() - gg * gg);
                        dgates[[b, 3 * size + k]] = d_o * o * (F::one() - o);
                        dstate[[b, size + k]] = dc * f;
                    }
                }
                // masked rows have zero gate gradients, so these products only
                // touch real rows
                let dh_prev = dgates.dot(&wv.t());
                Zip::from(dstate.slice_mut(s![.., ..size]))
                    .and(&dh_prev)
                    .for_each(|d, &v| *d += v);
                let dw = needs[2].then(|| sv.slice(s![.., ..size]).t().dot(&dgates));
                vec![Some(dgates), Some(dstate), dw]
            }),
        ))
    }

    /// `x·W_in + b` followed by [`Tape::lstm_step`].
    pub fn lstm_cell(&self, x: Var, state: Var, weights: &LstmVars, mask: &[bool]) -> Result<Var> {
        let proj = self.affine(x, weights.w_input, weights.bias)?;
        self.lstm_step(proj, state, weights.w_hidden, mask)
    }

    /// Splits a `[h | c]` state into its halves.
    pub fn split_state(&self, state: Var) -> Result<(Var, Var)> {
        let size = self.shape(state).1 / 2;
        Ok((self.slice_cols(state, 0, size)?, self.slice_cols(state, size, size)?))
    }

    /// Runs both directions over a time-major batch.
    ///
    /// `xs` is `(T·B) × d` with row `t·B + b` holding token `t` of sentence
    /// `b`; `masks[t][b]` marks real tokens. Returns `(h_fwd, h_bwd)`, each
    /// `(T·B) × s` in the same row layout. Both scans start from zero state,
    /// and the backward scan of a short sentence starts at its last real token.
    pub fn bilstm(
        &self,
        xs: Var,
        batch: usize,
        masks: &[StepMask],
        forward: &LstmVars,
        backward: &LstmVars,
    ) -> Result<(Var, Var)> {
        let steps = masks.len();
        if steps == 0 || self.shape(xs).0 != steps * batch {
            return shape_err(format!(
                "bilstm: {} rows for {steps} steps of batch {batch}",
                self.shape(xs).0
            ));
        }
        let scan = |weights: &LstmVars, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<Var>> {
            let size = self.shape(weights.w_hidden).0;
            let proj = self.affine(xs, weights.w_input, weights.bias)?;
            let mut state = self.constant(Array2::zeros((batch, 2 * size)));
            let mut hs = vec![None; steps];
            for t in order {
                let x_t = self.slice_rows(proj, t * batch, batch)?;
                state = self.lstm_step(x_t, state, weights.w_hidden, &masks[t])?;
                hs[t] = Some(self.slice_cols(state, 0, size)?);
            }
            Ok(hs.into_iter().map(|h| h.expect("every step visited")).collect())
        };
        let hf = scan(forward, &mut (0..steps))?;
        let hb = scan(backward, &mut (0..steps).rev())?;
        Ok((self.concat_rows(&hf)?, self.concat_rows(&hb)?))
    }

    /// Inverted dropout: keep with probability `1 - rate`, scale kept values
    /// by `1 / (1 - rate)`. Identity when not training or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = F::from_f64_lossy(1.0 / keep);
        let mask = Array2::from_shape_simple_fn(self.shape(x), || {
            if rng.random::<f64>() < keep {
                scale
            } else {
                F::zero()
            }
        });
        self.mul_const(x, mask)
    }

    /// Row-wise `z - logsumexp(z)`.
    pub fn log_softmax(&self, z: Var) -> Var {
        let zv = self.value(z);
        let mut y = (*zv).clone();
        for mut row in y.outer_iter_mut() {
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let probs = y.mapv(F::exp);
        self.push_op(
            y,
            &[z],
            Box::new(move |g, _| {
                let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                vec![Some(g - &(&probs * &gsum))]
            }),
        )
    }

    /// Mean negative log-likelihood of `gold` over rows where `mask` holds.
    pub fn masked_nll(&self, logp: Var, gold: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logp);
        let (rows, k) = lv.dim();
        if gold.len() != rows || mask.len() != rows {
            return shape_err(format!("masked_nll: {rows} rows, {} gold, {} mask", gold.len(), mask.len()));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Empty("masked_nll: every position is masked".into()));
        }
        if let Some(&bad) = gold.iter().zip(mask).filter(|(_, &m)| m).map(|(g, _)| g).find(|&&g| g >= k) {
            return shape_err(format!("masked_nll: gold index {bad} with {k} classes"));
        }
        let scale = F::one() / F::from_usize(count).expect("count fits");
        let mut total = F::zero();
        for (r, (&gi, &m)) in gold.iter().zip(mask).enumerate() {
            if m {
                total += lv[[r, gi]];
            }
        }
        let gold = gold.to_vec();
        let mask = mask.to_vec();
        Ok(self.push_op(
            Array2::from_elem((1, 1), -total * scale),
            &[logp],
            Box::new(move |g, _| {
                let mut d = Array2::zeros((rows, k));
                let v = -g[[0, 0]] * scale;
                for (r, (&gi, &m)) in gold.iter().zip(&mask).enumerate() {
                    if m {
                        d[[r, gi]] = v;
                    }
                }
                vec![Some(d)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type T = Tape<f64>;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` with respect to every entry of every input,
    /// compared against the tape gradients.
    fn check_grads(inputs: &[Array2<f64>], f: impl Fn(&T, &[Var]) -> Var) {
        let tape = T::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&tape, &vars);
        let mut grads = tape.backward(out).unwrap();
        let eval = |inputs: &[Array2<f64>]| {
            let tape = T::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
            let out = f(&tape, &vars);
            tape.value(out)[[0, 0]]
        };
        let h = 1e-5;
        for (n, v) in vars.iter().enumerate() {
            let analytic = grads.take_or_zeros(*v, inputs[n].dim());
            for idx in 0..inputs[n].len() {
                let (r, c) = (idx / inputs[n].ncols(), idx % inputs[n].ncols());
                let mut plus = inputs.to_vec();
                plus[n][[r, c]] += h;
                let mut minus = inputs.to_vec();
                minus[n][[r, c]] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[[r, c]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                assert!(rel < 1e-4, "input {n} [{r},{c}]: analytic {a}, numeric {numeric}");
            }
        }
    }

    /// Weighted sum so every output entry matters to the scalar.
    fn weighted_sum(tape: &T, x: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(tape.shape(x).0, tape.shape(x).1, &mut rng);
        let y = tape.mul_const(x, w).unwrap();
        tape.sum(y)
    }

    #[test]
    fn affine_identity_and_bias() {
        let tape = T::new();
        let eye = Array2::eye(2);
        let x = tape.constant(eye.clone());
        let w = tape.param(eye.clone());
        let b = tape.param(Array2::zeros((1, 2)));
        assert_eq!(*tape.value(tape.affine(x, w, b).unwrap()), eye);

        let w0 = tape.param(Array2::zeros((2, 3)));
        let c = tape.param(array![[1.5, -2.0, 0.25]]);
        let y = tape.value(tape.affine(x, w0, c).unwrap());
        for row in y.outer_iter() {
            assert_eq!(row, array![1.5, -2.0, 0.25]);
        }
        assert!(tape.affine(x, c, b).is_err());
    }

    #[test]
    fn affine_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = [random(3, 4, &mut rng), random(4, 2, &mut rng), random(1, 2, &mut rng)];
        check_grads(&inputs, |t, v| {
            let y = t.affine(v[0], v[1], v[2]).unwrap();
            weighted_sum(t, y, 9)
        });
    }

    #[test]
    fn conv_shapes_and_zero_input() {
        let tape = T::new();
        let chars = tape.constant(Array2::zeros((7, 25)));
        let filters = tape.param(Array2::from_elem((3 * 25, 25), 0.3));
        let bias = tape.param(Array2::zeros((1, 25)));
        let y = tape.conv1d_maxpool(chars, &[(0, 7)], filters, bias, 3).unwrap();
        assert_eq!(tape.shape(y), (1, 25));
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
        assert!(tape.conv1d_maxpool(chars, &[(0, 2)], filters, bias, 3).is_err());
    }

    #[test]
    fn conv_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = [random(9, 4, &mut rng), random(3 * 4, 5, &mut rng), random(1, 5, &mut rng)];
        check_grads(&inputs, |t, v| {
            let y = t.conv1d_maxpool(v[0], &[(0, 5), (5, 4)], v[1], v[2], 3).unwrap();
            weighted_sum(t, y, 3)
        });
    }

    #[test]
    fn conv_tie_goes_to_first_position() {
        let tape = T::new();
        let chars = tape.param(Array2::ones((4, 1)));
        let filters = tape.param(Array2::ones((3, 1)));
        let bias = tape.param(Array2::zeros((1, 1)));
        let y = tape.conv1d_maxpool(chars, &[(0, 4)], filters, bias, 3).unwrap();
        let mut g = tape.backward(tape.sum(y)).unwrap();
        let dchars = g.take(chars).unwrap();
        assert_eq!(dchars.column(0).to_vec(), vec![1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn lstm_zero_weights_give_zero_state() {
        let tape = T::new();
        let x = tape.constant(Array2::zeros((2, 16)));
        let state = tape.constant(Array2::zeros((2, 8)));
        let w = tape.param(Array2::zeros((4, 16)));
        let out = tape.lstm_step(x, state, w, &[true, true]).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_forget_bias_scales_cell() {
        let s = 3;
        let tape = T::new();
        let x = tape.constant(Array2::zeros((1, 5)));
        let c_prev = array![[0.5, -1.0, 2.0]];
        let mut state0 = Array2::zeros((1, 2 * s));
        state0.slice_mut(s![.., s..]).assign(&c_prev);
        let state = tape.constant(state0);
        let weights = LstmVars {
            w_input: tape.param(Array2::zeros((5, 4 * s))),
            w_hidden: tape.param(Array2::zeros((s, 4 * s))),
            bias: tape.param({
                let mut b = Array2::zeros((1, 4 * s));
                b.slice_mut(s![.., s..2 * s]).fill(1.0);
                b
            }),
        };
        let out = tape.lstm_cell(x, state, &weights, &[true]).unwrap();
        let (_, c) = tape.split_state(out).unwrap();
        let expected = c_prev.mapv(|v| v / (1.0 + (-1.0f64).exp()));
        for (a, b) in tape.value(c).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn lstm_step_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = [
            random(2, 3, &mut rng),
            random(2, 8, &mut rng),
            random(3, 16, &mut rng),
            random(4, 16, &mut rng),
            random(1, 16, &mut rng),
        ];
        check_grads(&inputs, |t, v| {
            let w = LstmVars {
                w_input: v[2],
                w_hidden: v[3],
                bias: v[4],
            };
            let out = t.lstm_cell(v[0], v[1], &w, &[true, false]).unwrap();
            weighted_sum(t, out, 4)
        });
    }

    #[test]
    fn masked_rows_pass_state_through() {
        let tape = T::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prev = random(2, 4, &mut rng);
        let x = tape.constant(random(2, 8, &mut rng));
        let state = tape.constant(prev.clone());
        let w = tape.param(random(2, 8, &mut rng));
        let out = tape.value(tape.lstm_step(x, state, w, &[false, true]).unwrap());
        assert_eq!(out.row(0), prev.row(0));
        assert_ne!(out.row(1), prev.row(1));
    }

    #[test]
    fn bilstm_single_step_and_reversal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tape = T::new();
        let fwd = LstmVars {
            w_input: tape.param(random(3, 8, &mut rng)),
            w_hidden: tape.param(random(2, 8, &mut rng)),
            bias: tape.param(random(1, 8, &mut rng)),
        };
        let bwd = LstmVars {
            w_input: tape.param(random(3, 8, &mut rng)),
            w_hidden: tape.param(random(2, 8, &mut rng)),
            bias: tape.param(random(1, 8, &mut rng)),
        };
        // T = 1: each direction equals a single cell from zero state
        let x1 = tape.constant(random(1, 3, &mut rng));
        let (hf, hb) = tape.bilstm(x1, 1, &[vec![true]], &fwd, &bwd).unwrap();
        let zero = tape.constant(Array2::zeros((1, 4)));
        let cell_f = tape.lstm_cell(x1, zero, &fwd, &[true]).unwrap();
        let cell_b = tape.lstm_cell(x1, zero, &bwd, &[true]).unwrap();
        assert_eq!(*tape.value(hf), tape.value(cell_f).slice(s![.., ..2]));
        assert_eq!(*tape.value(hb), tape.value(cell_b).slice(s![.., ..2]));

        // backward direction of x == forward scan with bwd weights of reversed x
        let xs = random(4, 3, &mut rng);
        let mut reversed = xs.clone();
        reversed.invert_axis(Axis(0));
        let masks = vec![vec![true]; 4];
        let x = tape.constant(xs);
        let xr = tape.constant(reversed);
        let (_, hb) = tape.bilstm(x, 1, &masks, &fwd, &bwd).unwrap();
        let (hf_rev, _) = tape.bilstm(xr, 1, &masks, &bwd, &fwd).unwrap();
        let mut expected = (*tape.value(hf_rev)).clone();
        expected.invert_axis(Axis(0));
        for (a, b) in tape.value(hb).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn bilstm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs: Vec<Array2<f64>> = vec![
            random(6, 3, &mut rng),
            random(3, 8, &mut rng),
            random(2, 8, &mut rng),
            random(1, 8, &mut rng),
            random(3, 8, &mut rng),
            random(2, 8, &mut rng),
            random(1, 8, &mut rng),
        ];
        // T = 3, batch of 2 where the second sentence has 2 tokens
        let masks = vec![vec![true, true], vec![true, true], vec![true, false]];
        check_grads(&inputs, |t, v| {
            let f = LstmVars {
                w_input: v[1],
                w_hidden: v[2],
                bias: v[3],
            };
            let b = LstmVars {
                w_input: v[4],
                w_hidden: v[5],
                bias: v[6],
            };
            let (hf, hb) = t.bilstm(v[0], 2, &masks, &f, &b).unwrap();
            let both = t.concat_cols(&[hf, hb]).unwrap();
            let kept = t.slice_rows(both, 0, 5).unwrap();
            weighted_sum(t, kept, 8)
        });
    }

    #[test]
    fn dropout_modes() {
        let tape = T::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = tape.param(random(3, 3, &mut rng));
        assert_eq!(tape.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
        assert!(tape.dropout(x, -0.1, false, &mut rng).is_err());
    }

    #[test]
    fn dropout_is_unbiased() {
        let tape = T::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 64;
        let input = Array2::from_shape_fn((1, n), |(_, j)| 0.5 + j as f64 / n as f64);
        let x = tape.constant(input.clone());
        let mut mean = Array2::<f64>::zeros((1, n));
        let masks = 10_000;
        for _ in 0..masks {
            let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
            mean += &*tape.value(y);
        }
        mean /= masks as f64;
        for (m, v) in mean.iter().zip(input.iter()) {
            assert!((m - v).abs() / v < 0.05, "{m} vs {v}");
        }
        let overall = mean.sum() / input.sum();
        assert!((overall - 1.0).abs() < 0.02, "{overall}");
    }

    #[test]
    fn log_softmax_properties() {
        let tape = T::new();
        let z = tape.param(array![[0.0, 0.0]]);
        let y = tape.value(tape.log_softmax(z));
        assert!((y[[0, 0]] + 2f64.ln()).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let raw = random(4, 5, &mut rng) * 30.0;
        let a = tape.value(tape.log_softmax(tape.constant(raw.clone())));
        let b = tape.value(tape.log_softmax(tape.constant(raw + 123.0)));
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        for row in a.outer_iter() {
            assert!(row.iter().all(|&v| v <= 0.0));
            assert!((row.mapv(f64::exp).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_and_nll_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs = [random(4, 3, &mut rng)];
        check_grads(&inputs, |t, v| {
            let lp = t.log_softmax(v[0]);
            t.masked_nll(lp, &[0, 2, 1, 1], &[true, true, false, true]).unwrap()
        });
    }

    #[test]
    fn nll_examples() {
        let tape = T::new();
        let perfect = tape.constant(array![[0.0, f64::NEG_INFINITY], [-50.0, 0.0]]);
        let loss = tape.masked_nll(perfect, &[0, 1], &[true, true]).unwrap();
        assert_eq!(tape.value(loss)[[0, 0]], 0.0);

        let uniform = tape.constant(Array2::from_elem((3, 2), -(2f64.ln())));
        let loss = tape.masked_nll(uniform, &[0, 1, 0], &[true, true, true]).unwrap();
        assert!((tape.value(loss)[[0, 0]] - 2f64.ln()).abs() < 1e-15);

        let a = tape.constant(array![[-0.1, -2.0], [-7.0, -3.0]]);
        let b = tape.constant(array![[-0.1, -2.0], [99.0, 12.0]]);
        let la = tape.value(tape.masked_nll(a, &[0, 1], &[true, false]).unwrap())[[0, 0]];
        let lb = tape.value(tape.masked_nll(b, &[0, 0], &[true, false]).unwrap())[[0, 0]];
        assert_eq!(la, lb);

        assert!(tape.masked_nll(a, &[0, 1], &[false, false]).is_err());
    }

    #[test]
    fn gather_and_slices_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let inputs = [random(4, 3, &mut rng), random(3, 2, &mut rng)];
        check_grads(&inputs, |t, v| {
            let g = t.gather_rows(v[0], &[Some(2), None, Some(2), Some(0)]).unwrap();
            let top = t.slice_rows(g, 1, 3).unwrap();
            let cols = t.slice_cols(top, 1, 2).unwrap();
            let joined = t.concat_rows(&[cols, v[1]]).unwrap();
            let s1 = weighted_sum(t, joined, 13);
            let s2 = t.sum(v[1]);
            t.add(s1, s2).unwrap()
        });
    }

    #[test]
    fn unused_parameters_get_no_gradient() {
        let tape = T::new();
        let a = tape.param(array![[1.0, 2.0]]);
        let unused = tape.param(array![[3.0]]);
        let loss = tape.sum(a);
        let mut g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.take_or_zeros(unused, (1, 1)), array![[0.0]]);
        assert_eq!(g.visited(), 1);
        assert!(tape.backward(a).is_err());
    }
}
