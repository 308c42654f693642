use super::tensor::Tensor;

pub fn relu(x: &mut Tensor) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// `y` is the ReLU output; gradient flows where it is positive.
pub fn relu_backward(y: &Tensor, dy: &mut Tensor) {
    for (g, v) in dy.data.iter_mut().zip(&y.data) {
        if *v <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn leaky_relu(x: &mut Tensor, slope: f32) {
    x.data.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v *= slope
        }
    });
}

/// `y` is the activation output (sign is preserved for positive slopes).
pub fn leaky_relu_backward(y: &Tensor, dy: &mut Tensor, slope: f32) {
    for (g, v) in dy.data.iter_mut().zip(&y.data) {
        if *v < 0.0 {
            *g *= slope;
        }
    }
}
