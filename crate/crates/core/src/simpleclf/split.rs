use ndarray::ArrayView2;

/// Row indices of every column sorted by value, ties by row.
pub(crate) struct Presorted {
    order: Vec<Vec<u32>>,
}

impl Presorted {
    pub fn new(x: ArrayView2<f64>) -> Self {
        let order = (0..x.ncols())
            .map(|j| {
                let col = x.column(j);
                let mut idx: Vec<u32> = (0..x.nrows() as u32).collect();
                idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Presorted { order }
    }

    /// Rows of a node in column `j` order. `member` marks the node's rows.
    pub fn node_order(&self, x: ArrayView2<f64>, j: usize, rows: &[u32], member: &[bool]) -> Vec<u32> {
        let full = &self.order[j];
        if rows.len() * 16 >= full.len() {
            full.iter().copied().filter(|&r| member[r as usize]).collect()
        } else {
            let col = x.column(j);
            let mut idx = rows.to_vec();
            idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
            idx
        }
    }
}

/// Midpoint threshold between two distinct sorted values; falls back to the
/// lower value if the midpoint rounds onto the upper one.
pub(crate) fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m >= b {
        a
    } else {
        m
    }
}
