use crate::error::{DiffError, Result};
use crate::tape::{BinaryKind, GradStore, Op, Tape, UnaryKind, Var};

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn binary(&self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, va, ga) = self.fetch(a)?;
        let (sb, vb, gb) = self.fetch(b)?;
        if sa != sb {
            let op = match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
            };
            return Err(DiffError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        let out = va
            .iter()
            .zip(vb.iter())
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            })
            .collect();
        Ok(self.push_node(sa, out, Op::Binary { kind, a, b }, ga || gb))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }

    fn unary(&self, kind: UnaryKind, x: Var) -> Result<Var> {
        let (sx, vx, gx) = self.fetch(x)?;
        let out = vx
            .iter()
            .map(|&v| match kind {
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Tanh => v.tanh(),
            })
            .collect();
        Ok(self.push_node(sx, out, Op::Unary { kind, x }, gx))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (sx, vx, gx) = self.fetch(x)?;
        let out = vx.iter().map(|&v| scale * v + shift).collect();
        Ok(self.push_node(sx, out, Op::Affine { x, scale }, gx))
    }

    /// Adds a length-n bias to every row of an m×n array.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (sx, vx, gx) = self.fetch(x)?;
        let (sb, vb, gb) = self.fetch(bias)?;
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(DiffError::ShapeMismatch {
                op: "add_bias",
                left: sx,
                right: sb,
            });
        }
        let n = sb[0];
        let out = vx
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb[i % n])
            .collect();
        Ok(self.push_node(sx, out, Op::AddBias { x, bias }, gx || gb))
    }

    /// Multiplies row i of an m×n array by `s[i]`; `s` has m elements.
    pub fn scale_rows(&self, x: Var, s: Var) -> Result<Var> {
        let (sx, vx, gx) = self.fetch(x)?;
        let (ss, vs, gs) = self.fetch(s)?;
        if sx.len() != 2 || vs.len() != sx[0] {
            return Err(DiffError::ShapeMismatch {
                op: "scale_rows",
                left: sx,
                right: ss,
            });
        }
        let n = sx[1];
        let out = vx
            .iter()
            .enumerate()
            .map(|(i, &v)| v * vs[i / n])
            .collect();
        Ok(self.push_node(sx, out, Op::ScaleRows { x, s }, gx || gs))
    }

    /// x · Wᵀ + b for x of shape m×in, W out×in and b of length out.
    pub fn linear(&self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul_nt(x, weight)?;
        self.add_bias(y, bias)
    }
}

pub(crate) fn binary_backward(kind: BinaryKind, a: Var, b: Var, g: &[f64], store: &mut GradStore<'_>) {
    let nodes = store.nodes;
    match kind {
        BinaryKind::Add => {
            store.add(a, g);
            store.add(b, g);
        }
        BinaryKind::Sub => {
            store.add(a, g);
            if let Some(db) = store.slot(b) {
                for (d, gi) in db.iter_mut().zip(g) {
                    *d -= gi;
                }
            }
        }
        BinaryKind::Mul => {
            let va = &nodes[a.0].value;
            let vb = &nodes[b.0].value;
            if let Some(da) = store.slot(a) {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(vb.iter()) {
                    *d += gi * y;
                }
            }
            if let Some(db) = store.slot(b) {
                for ((d, gi), x) in db.iter_mut().zip(g).zip(va.iter()) {
                    *d += gi * x;
                }
            }
        }
    }
}

pub(crate) fn unary_backward(kind: UnaryKind, x: Var, out: &[f64], g: &[f64], store: &mut GradStore<'_>) {
    let nodes = store.nodes;
    let vx = &nodes[x.0].value;
    if let Some(dx) = store.slot(x) {
        for i in 0..dx.len() {
            let local = match kind {
                UnaryKind::Relu => {
                    if vx[i] > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                UnaryKind::Sigmoid => out[i] * (1.0 - out[i]),
                UnaryKind::Tanh => 1.0 - out[i] * out[i],
            };
            dx[i] += g[i] * local;
        }
    }
}

pub(crate) fn affine_backward(x: Var, scale: f64, g: &[f64], store: &mut GradStore<'_>) {
    if let Some(dx) = store.slot(x) {
        for (d, gi) in dx.iter_mut().zip(g) {
            *d += scale * gi;
        }
    }
}

pub(crate) fn add_bias_backward(x: Var, bias: Var, g: &[f64], store: &mut GradStore<'_>) {
    store.add(x, g);
    if let Some(db) = store.slot(bias) {
        let n = db.len();
        for (i, gi) in g.iter().enumerate() {
            db[i % n] += gi;
        }
    }
}

pub(crate) fn scale_rows_backward(x: Var, s: Var, g: &[f64], store: &mut GradStore<'_>) {
    let nodes = store.nodes;
    let vx = &nodes[x.0].value;
    let vs = &nodes[s.0].value;
    let n = nodes[x.0].shape[1];
    if let Some(dx) = store.slot(x) {
        for (i, d) in dx.iter_mut().enumerate() {
            *d += g[i] * vs[i / n];
        }
    }
    if let Some(ds) = store.slot(s) {
        for (i, gi) in g.iter().enumerate() {
            ds[i / n] += gi * vx[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::{DiffArray, Tape};

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.param(&DiffArray::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.scalar(y).unwrap(), 0.5);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.25]);
    }

    #[test]
    fn relu_negative() {
        let tape = Tape::new();
        let x = tape.param(&DiffArray::scalar(-1.0));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.scalar(y).unwrap(), 0.0);
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap(), &[0.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let tape = Tape::new();
        let x = tape.constant(&DiffArray::vector(vec![-800.0, 800.0]).unwrap());
        let y = tape.sigmoid(x).unwrap();
        let v = tape.value(y);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 1.0);
    }

    #[test]
    fn binary_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(&DiffArray::zeros(vec![2]).unwrap());
        let b = tape.constant(&DiffArray::zeros(vec![3]).unwrap());
        assert!(tape.mul(a, b).is_err());
        assert!(tape.add(a, b).is_err());
    }
}
