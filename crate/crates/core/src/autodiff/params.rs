use ndarray::Array2;

/// Named parameter tensors. Slot `i` becomes tape leaf `i`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_values(entries: Vec<(String, Array2<f64>)>) -> Self {
        let mut store = Self::new();
        for (name, value) in entries {
            store.push(name, value);
        }
        store
    }

    /// Appends a tensor and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, value: Array2<f64>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    /// Number of slots.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters across all slots.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn get(&self, slot: usize) -> &Array2<f64> {
        &self.values[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Array2<f64> {
        &mut self.values[slot]
    }

    fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (slot, v) in self.values.iter().enumerate() {
            if flat < v.len() {
                return (slot, flat);
            }
            flat -= v.len();
        }
        panic!("flat parameter index out of range");
    }

    /// Scalar at `flat`, counting slots in order and elements row-major.
    pub fn flat_get(&self, flat: usize) -> f64 {
        let (slot, i) = self.locate(flat);
        let v = &self.values[slot];
        v[[i / v.ncols(), i % v.ncols()]]
    }

    pub fn flat_set(&mut self, flat: usize, x: f64) {
        let (slot, i) = self.locate(flat);
        let v = &mut self.values[slot];
        let cols = v.ncols();
        v[[i / cols, i % cols]] = x;
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values.iter().flat_map(|v| v.iter().copied()).collect()
    }
}

/// Gradients of a scalar with respect to every parameter slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    per_slot: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn new(per_slot: Vec<Array2<f64>>) -> Self {
        Self { per_slot }
    }

    pub fn slot(&self, slot: usize) -> &Array2<f64> {
        &self.per_slot[slot]
    }

    pub fn slots(&self) -> &[Array2<f64>] {
        &self.per_slot
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.per_slot.iter().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.per_slot.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }
}
