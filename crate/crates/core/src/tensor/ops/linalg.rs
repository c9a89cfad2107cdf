use crate::tensor::{gemm, shape_err, Element, Layout, Result, Tensor, Var};

/// Batched `op(a) · op(b)` over matching leading axes.
fn bmm<E: Element>(
    a: &[E],
    b: &[E],
    batch: usize,
    (m, k, n): (usize, usize, usize),
    ta: bool,
    tb: bool,
) -> Vec<E> {
    let la = if ta { Layout::row_major(k, m).t() } else { Layout::row_major(m, k) };
    let lb = if tb { Layout::row_major(n, k).t() } else { Layout::row_major(k, n) };
    let lc = Layout::row_major(m, n);
    let mut c = vec![E::zero(); batch * m * n];
    for i in 0..batch {
        gemm(
            &a[i * m * k..(i + 1) * m * k],
            la,
            &b[i * k * n..(i + 1) * k * n],
            lb,
            &mut c[i * m * n..(i + 1) * m * n],
            lc,
            E::zero(),
        );
    }
    c
}

impl<'t, E: Element> Var<'t, E> {
    fn matmul_impl(self, other: Var<'t, E>, transpose_b: bool) -> Result<Var<'t, E>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return shape_err("matmul", format!("{:?} x {:?}", sa, sb));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if transpose_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return shape_err("matmul", format!("inner extents {} and {} differ ({:?} x {:?})", k, kb, sa, sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let (av, bv) = (self.value(), other.value());
        let c = bmm(av.data(), bv.data(), batch, (m, k, n), false, transpose_b);
        let mut out_shape = sa[..r - 2].to_vec();
        out_shape.extend([m, n]);
        Ok(self.tape.record(Tensor::from_parts(out_shape, c), &[self, other], move |g, needs| {
            // C = A·B:  dA = dC·Bᵀ, dB = Aᵀ·dC.   C = A·Bᵀ:  dA = dC·B, dB = dCᵀ·A.
            let ga = needs[0].then(|| bmm(g, bv.data(), batch, (m, n, k), false, !transpose_b));
            let gb = needs[1].then(|| {
                if transpose_b {
                    bmm(g, av.data(), batch, (n, m, k), true, false)
                } else {
                    bmm(av.data(), g, batch, (k, m, n), true, false)
                }
            });
            vec![ga, gb]
        }))
    }

    /// `[..., M, K] x [..., K, N] -> [..., M, N]`.
    pub fn matmul(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.matmul_impl(other, false)
    }

    /// `[..., M, K] x [..., N, K]ᵀ -> [..., M, N]`.
    pub fn matmul_nt(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.matmul_impl(other, true)
    }
}
