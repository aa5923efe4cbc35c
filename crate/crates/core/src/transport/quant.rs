use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Symmetric per-tensor 8-bit quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub scale: f32,
    pub values: Vec<i8>,
    pub shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `scale = absmax / 127`, values rounded half away from zero.
pub fn quantize8(t: &Tensor<f32>) -> Result<QuantizedTensor> {
    if !t.is_finite() {
        return Err(Error::Encoding("cannot quantize non-finite activations".into()));
    }
    let absmax = t.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = absmax / 127.0;
    let values = if scale == 0.0 {
        vec![0; t.len()]
    } else {
        t.data()
            .iter()
            .map(|&v| (v as f64 / scale as f64).round().clamp(-127.0, 127.0) as i8)
            .collect()
    };
    Ok(QuantizedTensor {
        scale,
        values,
        shape: t.shape().to_vec(),
    })
}

pub fn dequantize8(q: &QuantizedTensor) -> Result<Tensor<f32>> {
    Tensor::new(
        q.shape.clone(),
        q.values.iter().map(|&v| v as f32 * q.scale).collect(),
    )
}
