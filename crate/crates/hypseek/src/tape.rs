//! Reverse-mode automatic differentiation over an explicit tape.
//!
//! The op set is deliberately small and closed: exactly what the embedding
//! pipeline and loss terms need (affine forms, hyperbolic and clamped inverse
//! trig functions, softmax building blocks, hinges, reductions). Every node
//! stores its local partial derivatives at forward time, so the backward pass
//! is a single reverse sweep accumulating `adjoint[parent] += adjoint[node] *
//! partial` with no op dispatch.
//!
//! Clamp conventions (shared with the plain evaluation path):
//! * `hinge(x) = max(x, 0)` with subgradient 0 at the kink;
//! * `sqrt_clamped(x) = sqrt(max(x, 0))` with derivative 0 for `x <= 0`;
//! * `acos_clamped` / `asin_clamped` clamp the argument into the principal
//!   domain and use derivative 0 in the clamped region.

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(u32);

/// Wengert list with precomputed local partials.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<f64>,
    edge_parent: Vec<u32>,
    edge_partial: Vec<f64>,
    edge_start: Vec<u32>,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            edge_parent: Vec::new(),
            edge_partial: Vec::new(),
            edge_start: vec![0],
        }
    }

    pub fn with_capacity(nodes: usize, edges: usize) -> Self {
        let mut t = Self {
            values: Vec::with_capacity(nodes),
            edge_parent: Vec::with_capacity(edges),
            edge_partial: Vec::with_capacity(edges),
            edge_start: Vec::with_capacity(nodes + 1),
        };
        t.edge_start.push(0);
        t
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> f64 {
        self.values[id.0 as usize]
    }

    fn push(&mut self, value: f64) -> NodeId {
        let id = NodeId(self.values.len() as u32);
        self.values.push(value);
        self.edge_start.push(self.edge_parent.len() as u32);
        id
    }

    fn edge(&mut self, parent: NodeId, partial: f64) {
        self.edge_parent.push(parent.0);
        self.edge_partial.push(partial);
        let last = self.edge_start.last_mut().expect("sentinel present");
        *last = self.edge_parent.len() as u32;
    }

    /// Gradient leaf (a trainable parameter).
    pub fn leaf(&mut self, value: f64) -> NodeId {
        self.push(value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        let id = self.push(v);
        self.edge(a, 1.0);
        self.edge(b, 1.0);
        id
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        let id = self.push(v);
        self.edge(a, 1.0);
        self.edge(b, -1.0);
        id
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let id = self.push(va * vb);
        self.edge(a, vb);
        self.edge(b, va);
        id
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let id = self.push(va / vb);
        self.edge(a, 1.0 / vb);
        self.edge(b, -va / (vb * vb));
        id
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) + c;
        let id = self.push(v);
        self.edge(a, 1.0);
        id
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        let id = self.push(v);
        self.edge(a, c);
        id
    }

    /// `c / x` for a constant numerator.
    pub fn const_over(&mut self, c: f64, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let id = self.push(c / vx);
        self.edge(x, -c / (vx * vx));
        id
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).exp();
        let id = self.push(v);
        self.edge(a, v);
        id
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let id = self.push(va.ln());
        self.edge(a, 1.0 / va);
        id
    }

    pub fn ln_1p(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let id = self.push(va.ln_1p());
        self.edge(a, 1.0 / (1.0 + va));
        id
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sqrt();
        let id = self.push(v);
        self.edge(a, 0.5 / v);
        id
    }

    /// `sqrt(max(x, 0))`; derivative 0 in the clamped region.
    pub fn sqrt_clamped(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = va.max(0.0).sqrt();
        let id = self.push(v);
        self.edge(a, if va > 0.0 { 0.5 / v } else { 0.0 });
        id
    }

    pub fn sinh(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let id = self.push(va.sinh());
        self.edge(a, va.cosh());
        id
    }

    pub fn cosh(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let id = self.push(va.cosh());
        self.edge(a, va.sinh());
        id
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).tanh();
        let id = self.push(v);
        self.edge(a, 1.0 - v * v);
        id
    }

    /// `max(x, 0)` with subgradient 0 at the kink.
    pub fn hinge(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let id = self.push(va.max(0.0));
        self.edge(a, if va > 0.0 { 1.0 } else { 0.0 });
        id
    }

    /// `acos(clamp(x, -1, 1))`; derivative 0 outside the open interval.
    pub fn acos_clamped(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let clamped = va.clamp(-1.0, 1.0);
        let id = self.push(clamped.acos());
        let partial = if va > -1.0 && va < 1.0 {
            -1.0 / (1.0 - va * va).sqrt()
        } else {
            0.0
        };
        self.edge(a, partial);
        id
    }

    /// `asin(min(x, 1))`; derivative 0 in the clamped region.
    pub fn asin_clamped(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let clamped = va.min(1.0);
        let id = self.push(clamped.asin());
        let partial = if va < 1.0 && va > -1.0 {
            1.0 / (1.0 - va * va).sqrt()
        } else {
            0.0
        };
        self.edge(a, partial);
        id
    }

    /// Dot product of two node vectors. Duplicated parents (e.g. `dot(x, x)`)
    /// accumulate correctly in the backward sweep.
    pub fn dot(&mut self, a: &[NodeId], b: &[NodeId]) -> NodeId {
        debug_assert_eq!(a.len(), b.len());
        let mut v = 0.0;
        for (x, y) in a.iter().zip(b) {
            v += self.value(*x) * self.value(*y);
        }
        let id = self.push(v);
        for (x, y) in a.iter().zip(b) {
            let (vx, vy) = (self.value(*x), self.value(*y));
            self.edge(*x, vy);
            self.edge(*y, vx);
        }
        id
    }

    /// Affine form with constant input: `sum_k w_k x_k + b` where `w` and `b`
    /// are nodes and `x` is plain data.
    pub fn affine_const_input(&mut self, weights: &[NodeId], input: &[f64], bias: NodeId) -> NodeId {
        debug_assert_eq!(weights.len(), input.len());
        let mut v = self.value(bias);
        for (w, x) in weights.iter().zip(input) {
            v += self.value(*w) * x;
        }
        let id = self.push(v);
        for (w, x) in weights.iter().zip(input) {
            self.edge(*w, *x);
        }
        self.edge(bias, 1.0);
        id
    }

    pub fn sum(&mut self, terms: &[NodeId]) -> NodeId {
        let v = terms.iter().map(|t| self.value(*t)).sum();
        let id = self.push(v);
        for t in terms {
            self.edge(*t, 1.0);
        }
        id
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let v = terms.iter().map(|(t, c)| self.value(*t) * c).sum();
        let id = self.push(v);
        for (t, c) in terms {
            self.edge(*t, *c);
        }
        id
    }

    /// `log(sum(exp(x_i)))` with the max-shift trick; partials are the
    /// softmax weights. The shift itself is treated as a constant, which
    /// matches the analytic derivative away from ties.
    pub fn log_sum_exp(&mut self, terms: &[NodeId]) -> NodeId {
        debug_assert!(!terms.is_empty());
        let max = terms
            .iter()
            .map(|t| self.value(*t))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for t in terms {
            sum += (self.value(*t) - max).exp();
        }
        let v = max + sum.ln();
        let id = self.push(v);
        for t in terms {
            let softmax = (self.value(*t) - max).exp() / sum;
            self.edge(*t, softmax);
        }
        id
    }

    /// Reverse sweep from `root`; returns the adjoint of every node.
    pub fn backward(&self, root: NodeId) -> Vec<f64> {
        let mut adjoint = vec![0.0; self.values.len()];
        adjoint[root.0 as usize] = 1.0;
        for node in (0..self.values.len()).rev() {
            let a = adjoint[node];
            if a == 0.0 {
                continue;
            }
            let start = self.edge_start[node] as usize;
            let end = self.edge_start[node + 1] as usize;
            for e in start..end {
                adjoint[self.edge_parent[e] as usize] += a * self.edge_partial[e];
            }
        }
        adjoint
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of<F>(build: F, inputs: &[f64]) -> (f64, Vec<f64>)
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = inputs.iter().map(|&x| tape.leaf(x)).collect();
        let root = build(&mut tape, &leaves);
        let value = tape.value(root);
        let adj = tape.backward(root);
        let grads = leaves.iter().map(|l| adj[l.0 as usize]).collect();
        (value, grads)
    }

    fn central_diff<F>(f: F, inputs: &[f64], h: f64) -> Vec<f64>
    where
        F: Fn(&[f64]) -> f64,
    {
        (0..inputs.len())
            .map(|i| {
                let mut up = inputs.to_vec();
                let mut dn = inputs.to_vec();
                up[i] += h;
                dn[i] -= h;
                (f(&up) - f(&dn)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn square_gradient() {
        let (v, g) = grad_of(|t, x| t.mul(x[0], x[0]), &[3.0]);
        assert_eq!(v, 9.0);
        assert_eq!(g[0], 6.0);
    }

    #[test]
    fn dot_with_shared_operand() {
        // d/dx ||x||^2 = 2x.
        let (v, g) = grad_of(|t, x| t.dot(x, x), &[1.0, -2.0, 0.5]);
        assert!((v - 5.25).abs() < 1e-15);
        assert_eq!(g, vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn log_sum_exp_partials_are_softmax() {
        let inputs = [0.3, -1.2, 2.0];
        let (v, g) = grad_of(|t, x| t.log_sum_exp(x), &inputs);
        let max = 2.0f64;
        let sum: f64 = inputs.iter().map(|x| (x - max).exp()).sum();
        assert!((v - (max + sum.ln())).abs() < 1e-15);
        let total: f64 = g.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (gi, xi) in g.iter().zip(&inputs) {
            assert!((gi - (xi - max).exp() / sum).abs() < 1e-15);
        }
    }

    #[test]
    fn hinge_subgradient_at_kink_is_zero() {
        let (_, g) = grad_of(|t, x| t.hinge(x[0]), &[0.0]);
        assert_eq!(g[0], 0.0);
        let (_, g) = grad_of(|t, x| t.hinge(x[0]), &[0.5]);
        assert_eq!(g[0], 1.0);
        let (_, g) = grad_of(|t, x| t.hinge(x[0]), &[-0.5]);
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn clamped_ops_have_zero_partials_outside_domain() {
        let (v, g) = grad_of(|t, x| t.acos_clamped(x[0]), &[1.5]);
        assert_eq!(v, 0.0);
        assert_eq!(g[0], 0.0);
        let (v, g) = grad_of(|t, x| t.asin_clamped(x[0]), &[2.0]);
        assert!((v - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert_eq!(g[0], 0.0);
        let (v, g) = grad_of(|t, x| t.sqrt_clamped(x[0]), &[-0.3]);
        assert_eq!(v, 0.0);
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn composite_expression_matches_finite_differences() {
        // f(x) = sinh(x0 x1) / (1 + cosh(x2)) + ln(1 + exp(x0))
        let build = |t: &mut Tape, x: &[NodeId]| {
            let prod = t.mul(x[0], x[1]);
            let s = t.sinh(prod);
            let c = t.cosh(x[2]);
            let denom = t.add_const(c, 1.0);
            let left = t.div(s, denom);
            let e = t.exp(x[0]);
            let right = t.ln_1p(e);
            t.add(left, right)
        };
        let f = |x: &[f64]| {
            (x[0] * x[1]).sinh() / (1.0 + x[2].cosh()) + x[0].exp().ln_1p()
        };
        let inputs = [0.4, -0.9, 1.3];
        let (v, g) = grad_of(build, &inputs);
        assert!((v - f(&inputs)).abs() < 1e-14);
        let fd = central_diff(f, &inputs, 1e-6);
        for (a, n) in g.iter().zip(&fd) {
            assert!((a - n).abs() < 1e-8, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn affine_const_input_gradients() {
        let input = [0.5, -1.0];
        let (v, g) = grad_of(
            |t, x| {
                let out = t.affine_const_input(&x[..2], &input, x[2]);
                t.mul(out, out)
            },
            &[2.0, 3.0, 0.25],
        );
        // out = 2*0.5 - 3 + 0.25 = -1.75; v = out^2
        assert!((v - 3.0625).abs() < 1e-15);
        // d(out^2)/dw_k = 2 out x_k, d/db = 2 out.
        assert!((g[0] - 2.0 * -1.75 * 0.5).abs() < 1e-15);
        assert!((g[1] - 2.0 * -1.75 * -1.0).abs() < 1e-15);
        assert!((g[2] - 2.0 * -1.75).abs() < 1e-15);
    }
}
