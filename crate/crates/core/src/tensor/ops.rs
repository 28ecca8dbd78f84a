//! Composite ops built from tape primitives.

use super::{Real, Tape, Var};
use crate::error::{LitError, Result};

impl<F: Real> Tape<F> {
    /// Channels-last convolution: `x[N×H×W×Cin]`, `w[K×K×Cin×Cout]`, zero padding.
    ///
    /// Output pixel p sums `x[p·stride − pad + g(k)] · w[g(k)]` over the K·K taps.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (k, cin, cout) = self.conv_weight("conv2d", x, w)?;
        let cols = self.im2col(x, k, stride, padding)?;
        let wm = self.reshape(w, &[k * k * cin, cout])?;
        self.linear(cols, wm, bias)
    }

    /// Deformable convolution with externally supplied offsets `[N×Ho×Wo×2KK]`.
    pub fn deformable_conv(
        &mut self,
        x: Var,
        offsets: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (k, cin, cout) = self.conv_weight("deformable_conv", x, w)?;
        let cols = self.deform_im2col(x, offsets, k, stride, padding)?;
        let wm = self.reshape(w, &[k * k * cin, cout])?;
        self.linear(cols, wm, bias)
    }

    fn conv_weight(&self, op: &'static str, x: Var, w: Var) -> Result<(usize, usize, usize)> {
        let sw = self.shape(w);
        let sx = self.shape(x);
        if sw.len() != 4 || sw[0] != sw[1] || sx.len() != 4 || sx[3] != sw[2] {
            return Err(LitError::shape(op, format!("input {sx:?}, weight {sw:?}")));
        }
        Ok((sw[0], sw[2], sw[3]))
    }
}
