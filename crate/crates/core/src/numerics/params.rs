use serde::{Deserialize, Serialize};

/// Handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    /// Whether weight decay applies to this tensor.
    pub decay: bool,
}

/// Named tensors stored back to back in one flat buffer.
///
/// The flat layout is what optimizers, gradient checks and checkpoints see.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    infos: Vec<ParamInfo>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        values: Vec<f64>,
        decay: bool,
    ) -> ParamId {
        let len: usize = shape.iter().product();
        assert_eq!(values.len(), len, "parameter initializer length");
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let id = ParamId(self.infos.len());
        self.infos.push(ParamInfo {
            name,
            shape: shape.to_vec(),
            offset: self.data.len(),
            len,
            decay,
        });
        self.data.extend(values);
        id
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        let info = &self.infos[id.0];
        &self.data[info.offset..info.offset + info.len]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let info = &self.infos[id.0];
        &mut self.data[info.offset..info.offset + info.len]
    }

    pub fn info(&self, id: ParamId) -> &ParamInfo {
        &self.infos[id.0]
    }

    pub fn infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.infos.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.infos.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Range of `id` inside the flat buffer.
    pub fn range(&self, id: ParamId) -> std::ops::Range<usize> {
        let info = &self.infos[id.0];
        info.offset..info.offset + info.len
    }

    /// Per-scalar weight-decay flags aligned with [`Self::flat`].
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.data.len()];
        for info in &self.infos {
            mask[info.offset..info.offset + info.len].fill(info.decay);
        }
        mask
    }

    /// Rebuilds a store from a serialized table and flat values.
    pub fn from_parts(infos: Vec<ParamInfo>, data: Vec<f64>) -> Result<Self, String> {
        let mut offset = 0;
        for info in &infos {
            let len: usize = info.shape.iter().product();
            if info.offset != offset || info.len != len {
                return Err(format!(
                    "parameter {} has inconsistent offset/shape",
                    info.name
                ));
            }
            offset += len;
        }
        if offset != data.len() {
            return Err(format!(
                "parameter table covers {offset} values, data has {}",
                data.len()
            ));
        }
        Ok(Self { infos, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous() {
        let mut s = ParamStore::new();
        let a = s.add("a.weight", &[2, 3], vec![1.0; 6], true);
        let b = s.add("a.bias", &[2], vec![2.0; 2], false);
        assert_eq!(s.len(), 8);
        assert_eq!(s.range(b), 6..8);
        assert_eq!(s.get(a), &[1.0; 6]);
        assert_eq!(s.decay_mask().iter().filter(|d| **d).count(), 6);
        assert_eq!(s.find("a.bias"), Some(b));
        let rebuilt = ParamStore::from_parts(s.infos().to_vec(), s.flat().to_vec()).unwrap();
        assert_eq!(rebuilt, s);
        assert!(ParamStore::from_parts(s.infos().to_vec(), vec![0.0; 7]).is_err());
    }
}
