//! Image ⇄ tensor conversion. Tensors are NCHW; images are planar CHW.

use distadapt_core::imagecore::{Image, CHANNELS};
use distadapt_nn::{Scalar, Tensor};

pub fn image_to_tensor<T: Scalar>(img: &Image) -> Tensor<T> {
    let (h, w) = img.dims();
    Tensor::from_vec([1, CHANNELS, h, w], img.data().iter().map(|&v| T::of(v)).collect())
}

pub fn batch_to_tensor<T: Scalar>(imgs: &[Image]) -> Tensor<T> {
    Tensor::stack(&imgs.iter().map(image_to_tensor).collect::<Vec<_>>())
}

/// Sample `n` of a `[N, 3, H, W]` tensor; values are clipped to `[0, 1]`.
pub fn tensor_to_image<T: Scalar>(t: &Tensor<T>, n: usize) -> Image {
    let [_, c, h, w] = t.shape();
    assert_eq!(c, CHANNELS, "image tensors have three channels");
    Image::from_planar(h, w, t.sample(n).iter().map(|v| v.f64()).collect()).expect("matching length")
}
