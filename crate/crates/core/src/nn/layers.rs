use candle_core::{Tensor, Var, D};

use super::ops::{self, ConvGeometry};
use super::params::ParamStore;
use crate::error::Result;
use crate::rng::SeededRng;

/// `y = x Wᵀ + b`, weight `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut SeededRng) -> Result<Self> {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = store.add_uniform(&format!("{name}.weight"), &[outputs, inputs], bound, rng)?;
        let bias = Some(store.add_uniform(&format!("{name}.bias"), &[outputs], bound, rng)?);
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    geom: ConvGeometry,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
        bias: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let k = geom.kernel;
        let bound = 1.0 / ((in_channels * k * k) as f64).sqrt();
        let weight = store.add_uniform(&format!("{name}.weight"), &[out_channels, in_channels, k, k], bound, rng)?;
        let bias = if bias { Some(store.add_uniform(&format!("{name}.bias"), &[out_channels], bound, rng)?) } else { None };
        Ok(Self { weight, bias, geom })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv2d(x, self.weight.as_tensor(), self.geom)?;
        add_channel_bias(y, self.bias.as_ref())
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Var,
    bias: Option<Var>,
    geom: ConvGeometry,
    output_padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
        output_padding: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let k = geom.kernel;
        let bound = 1.0 / ((out_channels * k * k) as f64).sqrt();
        let weight = store.add_uniform(&format!("{name}.weight"), &[in_channels, out_channels, k, k], bound, rng)?;
        let bias = Some(store.add_uniform(&format!("{name}.bias"), &[out_channels], bound, rng)?);
        Ok(Self { weight, bias, geom, output_padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv_transpose2d(x, self.weight.as_tensor(), self.geom, self.output_padding)?;
        add_channel_bias(y, self.bias.as_ref())
    }
}

fn add_channel_bias(y: Tensor, bias: Option<&Var>) -> Result<Tensor> {
    Ok(match bias {
        Some(b) => ops::add_channel_bias(&y, b.as_tensor())?,
        None => y,
    })
}

/// Batch normalization over `[n, c]` or `[n, c, h, w]` inputs. Training mode
/// normalizes with batch statistics and folds them into the running
/// estimates; evaluation mode uses the running estimates.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_constant(&format!("{name}.weight"), &[channels], 1.0, true)?,
            beta: store.add_constant(&format!("{name}.bias"), &[channels], 0.0, true)?,
            running_mean: store.add_constant(&format!("{name}.running_mean"), &[channels], 0.0, false)?,
            running_var: store.add_constant(&format!("{name}.running_var"), &[channels], 1.0, false)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        if train {
            let (mean, var) = ops::batch_moments(x)?;
            let c = mean.len();
            let count = x.elem_count() / c;
            let m = self.momentum;
            let correction = count as f64 / (count.max(2) - 1) as f64;
            let dev = x.device();
            let mean_t = Tensor::from_vec(mean, c, dev)?.to_dtype(x.dtype())?;
            let var_t = (Tensor::from_vec(var, c, dev)?.to_dtype(x.dtype())? * correction)?;
            self.running_mean.set(&((self.running_mean.as_tensor() * (1.0 - m))? + (mean_t * m)?)?)?;
            self.running_var.set(&((self.running_var.as_tensor() * (1.0 - m))? + (var_t * m)?)?)?;
            return Ok(ops::batch_norm_train(x, self.gamma.as_tensor(), self.beta.as_tensor(), self.eps)?);
        }
        let bshape: Vec<usize> = (0..x.rank()).map(|i| if i == 1 { x.dims()[1] } else { 1 }).collect();
        let mean = self.running_mean.as_tensor().reshape(bshape.as_slice())?;
        let var = self.running_var.as_tensor().reshape(bshape.as_slice())?;
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.as_tensor().reshape(bshape.as_slice())?)?
            .broadcast_add(&self.beta.as_tensor().reshape(bshape.as_slice())?)?)
    }
}

/// Mean over the spatial axes of `[n, c, h, w]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// `1 / (1 + e^{-x})`
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// `log(1 + e^{x})`, computed stably as `max(x, 0) + log(1 + e^{-|x|})`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use candle_core::{DType, Device};

    #[test]
    fn batchnorm_train_normalizes_and_tracks() {
        let mut store = ParamStore::new(DType::F64);
        let bn = BatchNorm::new(&mut store, "bn", 2).unwrap();
        let x = Tensor::from_vec(vec![1.0, 10.0, 3.0, 20.0, 5.0, 30.0], (3, 2), &Device::Cpu).unwrap();
        let y = bn.forward(&x, true).unwrap().to_vec2::<f64>().unwrap();
        let col0: Vec<f64> = y.iter().map(|r| r[0]).collect();
        assert!((col0.iter().sum::<f64>()).abs() < 1e-12);
        let rm = store.get("bn.running_mean").unwrap().to_vec1::<f64>().unwrap();
        assert!((rm[0] - 0.3).abs() < 1e-12 && (rm[1] - 2.0).abs() < 1e-12);
        let rv = store.get("bn.running_var").unwrap().to_vec1::<f64>().unwrap();
        assert!((rv[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-12);
        let ye = bn.forward(&x, false).unwrap();
        assert_eq!(ye.dims(), &[3, 2]);
    }

    #[test]
    fn softplus_and_sigmoid_stable() {
        let x = Tensor::from_vec(vec![-1000.0f64, 0.0, 1000.0], 3, &Device::Cpu).unwrap();
        let sp = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(sp[0], 0.0);
        assert!((sp[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(sp[2], 1000.0);
        let s = sigmoid(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(s, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn linear_shapes() {
        let mut store = ParamStore::new(DType::F32);
        let l = Linear::new(&mut store, "fc", 4, 3, &mut rng::seeded(0)).unwrap();
        let y = l.forward(&Tensor::ones((5, 4), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(y.dims(), &[5, 3]);
    }
}
