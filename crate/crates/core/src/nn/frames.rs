//! Padded batches of variable-length frame sequences.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{data_err, dim_err, Result};
use crate::tensor::{Scalar, Tensor};

/// A `B x T x C` batch where utterance `b` owns frames `0..lengths[b]`.
/// Frames past an utterance's length are padding and are kept at zero by
/// every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames<S = f32> {
    data: Vec<S>,
    time: usize,
    channels: usize,
    lengths: Vec<usize>,
}

impl<S: Scalar> Frames<S> {
    pub fn zeros(lengths: &[usize], channels: usize) -> Self {
        let time = lengths.iter().copied().max().unwrap_or(0);
        Self {
            data: vec![S::zero(); lengths.len() * time * channels],
            time,
            channels,
            lengths: lengths.to_vec(),
        }
    }

    /// Pads `T_i x C` sequences to a common length.
    pub fn from_sequences(seqs: &[&Tensor<S>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(data_err!("cannot batch zero sequences"));
        }
        let channels = seqs[0].last_dim();
        for s in seqs {
            if s.rank() != 2 || s.last_dim() != channels {
                return Err(dim_err!(
                    "sequence {:?} does not match channel axis {}",
                    s.shape(),
                    channels
                ));
            }
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.shape()[0]).collect();
        let mut out = Self::zeros(&lengths, channels);
        for (b, s) in seqs.iter().enumerate() {
            let start = b * out.time * channels;
            out.data[start..start + s.len()].copy_from_slice(s.data());
        }
        Ok(out)
    }

    pub fn single(seq: &Tensor<S>) -> Result<Self> {
        Self::from_sequences(&[seq])
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    #[inline]
    pub fn time(&self) -> usize {
        self.time
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn is_valid(&self, b: usize, t: usize) -> bool {
        t < self.lengths[b]
    }

    /// Row-validity mask over the flattened `B*T` frames.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.batch() * self.time);
        for &len in &self.lengths {
            m.extend((0..self.time).map(|t| t < len));
        }
        m
    }

    #[inline]
    pub fn frame(&self, b: usize, t: usize) -> &[S] {
        let i = (b * self.time + t) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn frame_mut(&mut self, b: usize, t: usize) -> &mut [S] {
        let i = (b * self.time + t) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// The full padded row of utterance `b` as a `T x C` slice.
    pub fn padded_row(&self, b: usize) -> &[S] {
        let n = self.time * self.channels;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn padded_row_mut(&mut self, b: usize) -> &mut [S] {
        let n = self.time * self.channels;
        &mut self.data[b * n..(b + 1) * n]
    }

    /// Valid frames of utterance `b` as a `len x C` tensor.
    pub fn sequence(&self, b: usize) -> Tensor<S> {
        let len = self.lengths[b];
        let start = b * self.time * self.channels;
        Tensor::new(&[len, self.channels], self.data[start..start + len * self.channels].to_vec())
            .expect("sequence length is positive")
    }

    pub fn zero_padding(&mut self) {
        for b in 0..self.batch() {
            let len = self.lengths[b];
            let (t, c) = (self.time, self.channels);
            self.data[(b * t + len) * c..(b + 1) * t * c]
                .iter_mut()
                .for_each(|x| *x = S::zero());
        }
    }

    /// Same geometry, new channel count, all zeros.
    pub fn like(&self, channels: usize) -> Self {
        Self {
            data: vec![S::zero(); self.batch() * self.time * channels],
            time: self.time,
            channels,
            lengths: self.lengths.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        let mut out = Self {
            data: self.data.iter().map(|&x| f(x)).collect(),
            time: self.time,
            channels: self.channels,
            lengths: self.lengths.clone(),
        };
        out.zero_padding();
        out
    }

    /// Views the whole padded batch as a `(B*T) x C` tensor.
    pub fn as_rows(&self) -> Tensor<S> {
        Tensor::new(&[self.batch() * self.time, self.channels], self.data.clone())
            .expect("frames are non-empty")
    }

    pub fn with_data(&self, channels: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != self.batch() * self.time * channels {
            return Err(dim_err!(
                "{} values cannot fill a {} x {} x {} batch",
                data.len(),
                self.batch(),
                self.time,
                channels
            ));
        }
        Ok(Self {
            data,
            time: self.time,
            channels,
            lengths: self.lengths.clone(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn check_same(&self, other: &Self) -> Result<()> {
        if self.lengths != other.lengths || self.channels != other.channels || self.time != other.time {
            return Err(dim_err!(
                "batch geometry mismatch: {} channels / lengths {:?} vs {} channels / lengths {:?}",
                self.channels,
                self.lengths,
                other.channels,
                other.lengths
            ));
        }
        Ok(())
    }

    /// Channels `lo..hi` of every frame.
    pub fn channel_slice(&self, lo: usize, hi: usize) -> Self {
        let w = hi - lo;
        let mut data = Vec::with_capacity(self.batch() * self.time * w);
        for row in self.data.chunks_exact(self.channels) {
            data.extend_from_slice(&row[lo..hi]);
        }
        Self {
            data,
            time: self.time,
            channels: w,
            lengths: self.lengths.clone(),
        }
    }

    /// Frame-wise concatenation along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| data_err!("nothing to concatenate"))?;
        for p in parts {
            if p.lengths != first.lengths {
                return Err(dim_err!("cannot concatenate batches with different lengths"));
            }
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let rows = first.batch() * first.time;
        let mut data = Vec::with_capacity(rows * channels);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(&p.data[r * p.channels..(r + 1) * p.channels]);
            }
        }
        Ok(Self {
            data,
            time: first.time,
            channels,
            lengths: first.lengths.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Frames<T> {
        Frames {
            data: self.data.iter().map(|x| T::of(x.as_f64())).collect(),
            time: self.time,
            channels: self.channels,
            lengths: self.lengths.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pads_and_recovers_sequences() {
        let a = Tensor::<f64>::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::new(&[3, 2], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap();
        let f = Frames::from_sequences(&[&a, &b]).unwrap();
        assert_eq!(f.time(), 3);
        assert_eq!(f.frame(0, 2), &[0.0, 0.0]);
        assert_eq!(f.sequence(0), a);
        assert_eq!(f.sequence(1), b);
        assert_eq!(f.mask(), vec![true, true, false, true, true, true]);
        let sliced = f.channel_slice(1, 2);
        assert_eq!(sliced.frame(1, 2), &[10.0]);
        let joined = Frames::concat_channels(&[&sliced, &f]).unwrap();
        assert_eq!(joined.frame(1, 0), &[6.0, 5.0, 6.0]);
    }
}
