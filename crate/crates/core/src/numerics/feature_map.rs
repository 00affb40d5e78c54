use super::NumericsError;

/// Dense `channels x height x width` activations at a known stride.
///
/// Data is row-major per channel: index `(c * height + y) * width + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    stride: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        stride: usize,
        data: Vec<f64>,
    ) -> Result<Self, NumericsError> {
        if stride == 0 {
            return Err(NumericsError::InvalidArgument("stride must be >= 1".into()));
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(NumericsError::LengthMismatch {
                what: "feature map data",
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite(format!(
                "feature map value at index {i}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            stride,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize, stride: usize) -> Self {
        Self::filled(channels, height, width, stride, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, stride: usize, value: f64) -> Self {
        assert!(stride >= 1, "stride must be >= 1");
        Self {
            channels,
            height,
            width,
            stride,
            data: vec![value; channels * height * width],
        }
    }

    /// Builds a map without the finiteness scan. Length and stride are still asserted.
    pub(crate) fn from_raw(
        channels: usize,
        height: usize,
        width: usize,
        stride: usize,
        data: Vec<f64>,
    ) -> Self {
        assert_eq!(data.len(), channels * height * width);
        assert!(stride >= 1);
        Self {
            channels,
            height,
            width,
            stride,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        assert!(stride >= 1);
        self.stride = stride;
        self
    }

    /// Stacks maps of equal spatial size along the channel axis.
    pub fn concat_channels(maps: &[&FeatureMap]) -> Result<FeatureMap, NumericsError> {
        let first = maps
            .first()
            .ok_or_else(|| NumericsError::InvalidArgument("concat of zero maps".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for m in maps {
            if m.height != h || m.width != w {
                return Err(NumericsError::ShapeMismatch(format!(
                    "concat: {}x{} vs {}x{}",
                    m.height, m.width, h, w
                )));
            }
            channels += m.channels;
            data.extend_from_slice(&m.data);
        }
        Ok(FeatureMap::from_raw(channels, h, w, first.stride, data))
    }

    /// Mean over all spatial positions of channel `c`.
    pub fn spatial_mean(&self, c: usize) -> f64 {
        let plane = self.channel(c);
        plane.iter().sum::<f64>() / plane.len().max(1) as f64
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length_and_non_finite() {
        assert!(FeatureMap::new(2, 2, 2, 1, vec![0.0; 7]).is_err());
        assert!(FeatureMap::new(1, 1, 2, 1, vec![0.0, f64::NAN]).is_err());
        assert!(FeatureMap::new(1, 1, 1, 0, vec![0.0]).is_err());
        assert!(FeatureMap::new(1, 1, 1, 4, vec![0.0]).is_ok());
    }

    #[test]
    fn concat_stacks_channels() {
        let a = FeatureMap::filled(1, 2, 2, 8, 1.0);
        let b = FeatureMap::filled(2, 2, 2, 8, 2.0);
        let c = FeatureMap::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.channels(), 3);
        assert_eq!(c.at(0, 1, 1), 1.0);
        assert_eq!(c.at(2, 0, 1), 2.0);
        let d = FeatureMap::filled(1, 3, 2, 8, 0.0);
        assert!(FeatureMap::concat_channels(&[&a, &d]).is_err());
    }
}
