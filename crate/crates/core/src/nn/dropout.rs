use ndarray::{Array, Dimension};
use rand::Rng;

use super::Mode;

/// Inverted dropout. In training, each unit is kept with probability
/// `1 - rate` and scaled by `1 / (1 - rate)`; the returned mask holds those
/// multipliers for the backward pass. Evaluation mode and `rate == 0` are the
/// identity and draw no random numbers.
pub fn dropout<D: Dimension, R: Rng + ?Sized>(
    x: &Array<f64, D>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> (Array<f64, D>, Option<Array<f64, D>>) {
    assert!((0.0..1.0).contains(&rate), "dropout rate {rate} outside [0, 1)");
    if mode == Mode::Eval || rate == 0.0 {
        return (x.clone(), None);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = x.map(|_| if rng.random::<f64>() >= rate { keep } else { 0.0 });
    (x * &mask, Some(mask))
}
