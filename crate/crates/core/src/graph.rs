//! Sensor montages, K-nearest-neighbour sensor graphs and spectral smoothing.
//!
//! A [`SensorGraph`] is built from electrode coordinates: edge weights are
//! inverse Euclidean distances restricted to the (union-symmetrized) K nearest
//! neighbours of every sensor. The combinatorial Laplacian `L = D - A` and its
//! eigenpairs define the graph Fourier transform used for low-pass smoothing.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channels shared by the 14-electrode consumer headset layout.
pub const EMOTIV_14: [&str; 14] = [
    "AF3", "F7", "F3", "FC5", "T7", "P7", "O1", "O2", "P8", "T8", "FC6", "F4", "F8", "AF4",
];

/// One electrode: label plus position in a common head frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensor {
    pub label: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Sensor {
    pub fn new(label: impl Into<String>, x: f64, y: f64, z: f64) -> Self {
        Self { label: label.into(), x, y, z }
    }

    fn distance(&self, other: &Sensor) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// Ordered list of uniquely labelled sensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Montage {
    sensors: Vec<Sensor>,
}

impl Montage {
    pub fn new(sensors: Vec<Sensor>) -> Result<Self> {
        if sensors.len() < 2 {
            return Err(Error::arg(format!("montage needs at least 2 sensors, got {}", sensors.len())));
        }
        for (i, s) in sensors.iter().enumerate() {
            if !(s.x.is_finite() && s.y.is_finite() && s.z.is_finite()) {
                return Err(Error::arg(format!("sensor {} has non-finite coordinates", s.label)));
            }
            if sensors[..i].iter().any(|o| o.label == s.label) {
                return Err(Error::arg(format!("duplicate sensor label {}", s.label)));
            }
        }
        Ok(Self { sensors })
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn sensors(&self) -> &[Sensor] {
        &self.sensors
    }

    pub fn labels(&self) -> Vec<String> {
        self.sensors.iter().map(|s| s.label.clone()).collect()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.sensors.iter().position(|s| s.label == label)
    }

    /// Selects sensors by label, in the order given. Missing labels are all
    /// reported in one error.
    pub fn subset<S: AsRef<str>>(&self, labels: &[S]) -> Result<(Montage, Vec<usize>)> {
        let mut missing = Vec::new();
        let mut idx = Vec::with_capacity(labels.len());
        for l in labels {
            match self.index_of(l.as_ref()) {
                Some(i) => idx.push(i),
                None => missing.push(l.as_ref().to_string()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::data(format!("montage is missing sensors: {}", missing.join(", "))));
        }
        let sensors = idx.iter().map(|&i| self.sensors[i].clone()).collect();
        Ok((Montage::new(sensors)?, idx))
    }

    /// Reads a `label,x,y,z` CSV.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["label", "x", "y", "z"];
        if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(Error::format(format!("montage header must be label,x,y,z, got {:?}", headers)));
        }
        let sensors = rdr.deserialize().collect::<std::result::Result<Vec<Sensor>, _>>()?;
        Montage::new(sensors)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for s in &self.sensors {
            wtr.serialize(s)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_csv_writer(std::fs::File::create(path)?)
    }

    /// The 32-electrode 10-20 layout on a unit sphere (x right, y nose, z up).
    pub fn standard_1020_32() -> Self {
        // (label, signed polar angle from vertex, azimuth from the left-right axis), degrees.
        const LAYOUT: [(&str, f64, f64); 32] = [
            ("Fp1", -92.0, -72.0),
            ("AF3", -74.0, -65.0),
            ("F3", -60.0, -51.0),
            ("F7", -92.0, -36.0),
            ("FC5", -72.0, -21.0),
            ("FC1", -32.0, -45.0),
            ("C3", -46.0, 0.0),
            ("T7", -92.0, 0.0),
            ("CP5", -72.0, 21.0),
            ("CP1", -32.0, 45.0),
            ("P3", -60.0, 51.0),
            ("P7", -92.0, 36.0),
            ("PO3", -74.0, 65.0),
            ("O1", -92.0, 72.0),
            ("Oz", 92.0, -90.0),
            ("Pz", 46.0, -90.0),
            ("Fp2", 92.0, 72.0),
            ("AF4", 74.0, 65.0),
            ("Fz", 46.0, 90.0),
            ("F4", 60.0, 51.0),
            ("F8", 92.0, 36.0),
            ("FC6", 72.0, 21.0),
            ("FC2", 32.0, 45.0),
            ("Cz", 0.0, 0.0),
            ("C4", 46.0, 0.0),
            ("T8", 92.0, 0.0),
            ("CP6", 72.0, -21.0),
            ("CP2", 32.0, -45.0),
            ("P4", 60.0, -51.0),
            ("P8", 92.0, -36.0),
            ("PO4", 74.0, -65.0),
            ("O2", 92.0, -72.0),
        ];
        let sensors = LAYOUT
            .iter()
            .map(|&(label, theta, phi)| {
                let (t, p) = (theta.to_radians(), phi.to_radians());
                Sensor::new(label, t.sin() * p.cos(), t.sin() * p.sin(), t.cos())
            })
            .collect();
        Montage::new(sensors).expect("built-in layout is valid")
    }
}

/// Adjacency, Laplacian and Laplacian eigenpairs of a sensor graph.
#[derive(Debug, Clone)]
pub struct SensorGraph {
    pub adjacency: Array2<f64>,
    pub laplacian: Array2<f64>,
    /// Ascending.
    pub eigvals: Array1<f64>,
    /// Column `j` pairs with `eigvals[j]`.
    pub eigvecs: Array2<f64>,
    pub k_neighbors: usize,
}

impl SensorGraph {
    /// Assembles a graph from a precomputed weight matrix.
    pub fn from_adjacency(adjacency: Array2<f64>, k_neighbors: usize) -> Result<Self> {
        let laplacian = graph_laplacian(&adjacency)?;
        let (eigvals, eigvecs) = eig_sym(&laplacian)?;
        Ok(Self { adjacency, laplacian, eigvals, eigvecs, k_neighbors })
    }

    pub fn n(&self) -> usize {
        self.adjacency.nrows()
    }

    /// Undirected edges `(i, j, weight)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let w = self.adjacency[[i, j]];
                if w != 0.0 {
                    out.push((i, j, w));
                }
            }
        }
        out
    }

    /// Writes the edge list as `i,j,weight` CSV.
    pub fn write_edges_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["i", "j", "weight"])?;
        for (i, j, w) in self.edges() {
            wtr.write_record([i.to_string(), j.to_string(), format!("{w:.17e}")])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Graph Fourier transform of an `n x T` signal.
    pub fn gft(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_rows(x.nrows())?;
        Ok(self.eigvecs.t().dot(&x))
    }

    /// Inverse transform of `n x T` spectral coefficients.
    pub fn igft(&self, coeffs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_rows(coeffs.nrows())?;
        Ok(self.eigvecs.dot(&coeffs))
    }

    /// Ideal low-pass filter keeping the first `bandwidth` graph frequencies.
    ///
    /// Computed as a projection onto the span of the leading eigenvectors, so
    /// any orthonormal basis of a repeated eigenvalue inside the pass band
    /// gives the same result.
    pub fn lowpass_smooth(&self, x: ArrayView2<f64>, bandwidth: usize) -> Result<Array2<f64>> {
        self.check_rows(x.nrows())?;
        let filter = GraphFilter::new(bandwidth, self.n())?;
        let w = filter.bandwidth;
        if w < self.n() && (self.eigvals[w] - self.eigvals[w - 1]).abs() < 1e-10 {
            log::warn!(
                "repeated eigenvalue {:.3e} straddles the filter edge at bandwidth {w}; smoothing depends on the eigenbasis",
                self.eigvals[w]
            );
        }
        let basis = self.eigvecs.slice(ndarray::s![.., ..w]);
        let coeffs = basis.t().dot(&x);
        Ok(basis.dot(&coeffs))
    }

    /// Default bandwidth `floor(n / 2)`, at least 1.
    pub fn default_bandwidth(&self) -> usize {
        (self.n() / 2).max(1)
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        if rows != self.n() {
            return Err(Error::arg(format!("signal has {rows} rows, graph has {} nodes", self.n())));
        }
        Ok(())
    }
}

/// Binary spectral mask: ones for the first `bandwidth` coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFilter {
    pub bandwidth: usize,
    pub mask: Vec<f64>,
}

impl GraphFilter {
    pub fn new(bandwidth: usize, n: usize) -> Result<Self> {
        if bandwidth == 0 || bandwidth > n {
            return Err(Error::arg(format!("bandwidth {bandwidth} outside [1, {n}]")));
        }
        let mask = (0..n).map(|i| if i < bandwidth { 1.0 } else { 0.0 }).collect();
        Ok(Self { bandwidth, mask })
    }

    /// Applies the mask row-wise to spectral coefficients.
    pub fn apply(&self, coeffs: &mut Array2<f64>) {
        for (mut row, &m) in coeffs.axis_iter_mut(Axis(0)).zip(&self.mask) {
            row *= m;
        }
    }
}

/// Builds the union-symmetrized K-NN graph with inverse-distance weights.
///
/// Sensor `j` is a neighbour of `i` when it is among the `k` closest sensors
/// to `i`; equal distances are broken by ascending index. An edge exists when
/// either direction holds.
pub fn build_knn_adjacency(montage: &Montage, k: usize) -> Result<SensorGraph> {
    let a = knn_adjacency(montage, k)?;
    SensorGraph::from_adjacency(a, k)
}

/// The weight matrix alone; see [`build_knn_adjacency`].
pub fn knn_adjacency(montage: &Montage, k: usize) -> Result<Array2<f64>> {
    let n = montage.len();
    if k == 0 || k >= n {
        return Err(Error::arg(format!("k = {k} outside [1, {}]", n - 1)));
    }
    let s = montage.sensors();
    let mut dist = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let d = s[i].distance(&s[j]);
            if d <= 0.0 {
                return Err(Error::DegenerateMontage(format!(
                    "sensors {} and {} share coordinates",
                    s[i].label, s[j].label
                )));
            }
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    let mut a = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&p, &q| dist[[i, p]].total_cmp(&dist[[i, q]]).then(p.cmp(&q)));
        for &j in &others[..k] {
            let w = 1.0 / dist[[i, j]];
            a[[i, j]] = w;
            a[[j, i]] = w;
        }
    }
    Ok(a)
}

/// Combinatorial Laplacian `D - A`.
pub fn graph_laplacian(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::arg("adjacency must be square"));
    }
    check_symmetric(a)?;
    for i in 0..n {
        if a[[i, i]] != 0.0 {
            return Err(Error::arg(format!("adjacency diagonal entry {i} is nonzero")));
        }
        if a.row(i).iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::arg(format!("adjacency row {i} has negative or non-finite weights")));
        }
    }
    let mut l = -a.clone();
    for i in 0..n {
        l[[i, i]] = a.row(i).sum();
    }
    Ok(l)
}

/// Symmetric eigendecomposition with ascending eigenvalues and a fixed sign
/// convention: in each eigenvector the entry of largest magnitude (lowest
/// index on ties) is positive.
pub fn eig_sym(m: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = m.nrows();
    if m.ncols() != n || n == 0 {
        return Err(Error::arg("matrix must be square and non-empty"));
    }
    check_symmetric(m)?;
    let dm = DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
    let eig = SymmetricEigen::new(dm);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&p, &q| eig.eigenvalues[p].total_cmp(&eig.eigenvalues[q]).then(p.cmp(&q)));
    let mut vals = Array1::zeros(n);
    let mut vecs = Array2::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        vals[col] = eig.eigenvalues[src];
        // Near-equal magnitudes count as ties so rounding noise cannot flip the sign.
        let peak = (0..n).fold(0.0f64, |acc, i| acc.max(eig.eigenvectors[(i, src)].abs()));
        let pivot = (0..n).find(|&i| eig.eigenvectors[(i, src)].abs() >= peak * (1.0 - 1e-9)).unwrap_or(0);
        let sign = if eig.eigenvectors[(pivot, src)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vecs[[i, col]] = sign * eig.eigenvectors[(i, src)];
        }
    }
    Ok((vals, vecs))
}

fn check_symmetric(m: &Array2<f64>) -> Result<()> {
    let n = m.nrows();
    let scale = m.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    for i in 0..n {
        for j in i + 1..n {
            if (m[[i, j]] - m[[j, i]]).abs() > 1e-12 * scale {
                return Err(Error::arg(format!("matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Largest absolute entry.
pub fn max_abs(m: &Array2<f64>) -> f64 {
    m.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
}
