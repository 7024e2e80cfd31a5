use super::{DtrError, Result};
use crate::dfe::DepthDistribution;
use crate::rng::{uniform_param, Prng};
use crate::tensor::{Conv2dParams, Parameterized, Tensor};

/// Depth positional encoding: a learnable row per depth bin, looked up by
/// each pixel's most likely bin and refined by a 3x3 convolution.
#[derive(Clone, Debug)]
pub struct DpeState {
    /// `[D, C]`
    pub table: Tensor,
    /// C -> C, 3x3, pad 1.
    pub conv: Conv2dParams,
}

impl DpeState {
    pub fn init(rng: &mut Prng, bins: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            table: uniform_param(rng, &[bins, channels], channels),
            conv: Conv2dParams::init(rng, channels, channels, 3, 1, 1, 1, true)?,
        })
    }

    pub fn bins(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.table.shape()[1]
    }
}

impl Parameterized for DpeState {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.table];
        out.extend(self.conv.params_mut());
        out
    }
}

/// `P + conv(P)` where `P[:, y, x] = table[argmax_d dist(d, y, x)]`.
pub fn build_dpe(dist: &DepthDistribution, s: &DpeState) -> Result<Tensor> {
    let (d, h, w) = dist.dims();
    if d != s.bins() {
        return Err(DtrError::Shape {
            what: "distribution with one channel per table row",
            shape: dist.probs.shape().to_vec(),
        });
    }
    let lookup = s.table.index_rows(&dist.argmax())?; // [H*W, C]
    let p = lookup.transpose()?.reshape(&[s.channels(), h, w])?;
    Ok(p.add(&s.conv.forward(&p)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn zero_conv(s: &mut DpeState) {
        s.conv.weight = Tensor::zeros(s.conv.weight.shape());
        s.conv.bias = Some(Tensor::zeros(&[s.channels()]));
    }

    fn dist_from_bins(d: usize, h: usize, w: usize, bins: &[usize], peak: f64) -> DepthDistribution {
        let rest = (1.0 - peak) / (d - 1) as f64;
        let mut p = vec![rest; d * h * w];
        for (pixel, &b) in bins.iter().enumerate() {
            p[b * h * w + pixel] = peak;
        }
        DepthDistribution::new(Tensor::new(p, &[d, h, w]).unwrap()).unwrap()
    }

    #[test]
    fn constant_argmax_gives_constant_encoding() {
        let mut s = DpeState::init(&mut stream(1, 1), 5, 3).unwrap();
        zero_conv(&mut s);
        let dist = dist_from_bins(5, 2, 2, &[2; 4], 0.6);
        let e = build_dpe(&dist, &s).unwrap();
        let row = &s.table.data()[2 * 3..3 * 3];
        for c in 0..3 {
            assert!(e.data()[c * 4..(c + 1) * 4].iter().all(|&v| v == row[c]));
        }
    }

    #[test]
    fn lookup_picks_the_argmax_row() {
        let mut s = DpeState::init(&mut stream(2, 1), 5, 3).unwrap();
        zero_conv(&mut s);
        let dist = dist_from_bins(5, 1, 3, &[0, 3, 4], 0.5);
        let e = build_dpe(&dist, &s).unwrap();
        for c in 0..3 {
            assert_eq!(e.data()[c * 3 + 1], s.table.data()[3 * 3 + c]);
        }
    }

    #[test]
    fn argmax_preserving_changes_do_not_matter() {
        let s = DpeState::init(&mut stream(3, 1), 4, 2).unwrap();
        let a = build_dpe(&dist_from_bins(4, 3, 3, &[0, 1, 2, 3, 0, 1, 2, 3, 0], 0.4), &s).unwrap();
        let b = build_dpe(&dist_from_bins(4, 3, 3, &[0, 1, 2, 3, 0, 1, 2, 3, 0], 0.9), &s).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn equal_neighbourhoods_give_equal_encodings() {
        let s = DpeState::init(&mut stream(4, 1), 3, 2).unwrap();
        // 3x6 map built from two identical 3x3 blocks; centres (1,1) and (1,4)
        let block = [0, 1, 2, 2, 1, 0, 1, 1, 2];
        let mut bins = Vec::new();
        for r in 0..3 {
            bins.extend_from_slice(&block[r * 3..r * 3 + 3]);
            bins.extend_from_slice(&block[r * 3..r * 3 + 3]);
        }
        let e = build_dpe(&dist_from_bins(3, 3, 6, &bins, 0.8), &s).unwrap();
        for c in 0..2 {
            assert_eq!(e.data()[c * 18 + 6 + 1], e.data()[c * 18 + 6 + 4]);
        }
    }

    #[test]
    fn bin_count_must_match() {
        let s = DpeState::init(&mut stream(5, 1), 4, 2).unwrap();
        assert!(build_dpe(&dist_from_bins(3, 1, 1, &[0], 0.5), &s).is_err());
    }
}
