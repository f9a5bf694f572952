//! Minimal dense-tensor machinery: parameter storage and layers with
//! hand-written gradients, generic over `f32`/`f64`.

mod layers;
mod params;
mod tensor;

pub use layers::{
    avg_pool_axis, max_pool_time, max_pool_time_backward, relu, relu_backward, softmax_rows,
    softmax_rows_backward, AxisConv, ConvAxis, Linear,
};
pub use params::{Grads, ParamEntry, ParamId, ParamStore};
pub use tensor::ScaleTimeTensor;
