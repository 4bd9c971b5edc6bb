use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Result, SgameError};
use crate::linalg::Matrix;
use crate::model::{PreparedModel, SgameParams};
use crate::scalar::Scalar;

/// Fixed design points in [0,1]^p with their responses in R^q.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    design: Matrix<T>,
    responses: Matrix<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(design: Matrix<T>, responses: Matrix<T>) -> Result<Self> {
        if design.rows() == 0 {
            return Err(SgameError::InvalidDataset("need at least one observation".into()));
        }
        if design.rows() != responses.rows() {
            return Err(SgameError::dim("response rows", design.rows(), responses.rows()));
        }
        if responses.cols() == 0 {
            return Err(SgameError::InvalidDataset("responses need at least one column".into()));
        }
        check_design(&design)?;
        if !responses.all_finite() {
            return Err(SgameError::InvalidDataset("non-finite response".into()));
        }
        Ok(Dataset { design, responses })
    }

    pub fn n(&self) -> usize {
        self.design.rows()
    }

    pub fn p(&self) -> usize {
        self.design.cols()
    }

    pub fn q(&self) -> usize {
        self.responses.cols()
    }

    pub fn design(&self) -> &Matrix<T> {
        &self.design
    }

    pub fn responses(&self) -> &Matrix<T> {
        &self.responses
    }

    pub fn x(&self, i: usize) -> &[T] {
        self.design.row(i)
    }

    pub fn y(&self, i: usize) -> &[T] {
        self.responses.row(i)
    }

    /// Draws one response per design row from s_ψ(·|x_i).
    pub fn simulate<R: Rng + ?Sized>(psi: &SgameParams<T>, design: Matrix<T>, rng: &mut R) -> Result<Self> {
        check_design(&design)?;
        let model = PreparedModel::new(psi)?;
        let mut responses = Matrix::zeros(design.rows(), psi.q());
        for i in 0..design.rows() {
            let y = model.sample(design.row(i), rng)?;
            responses.row_mut(i).copy_from_slice(&y);
        }
        Dataset::new(design, responses)
    }

    /// Reads a CSV whose header is `x1,...,xp,y1,...,yq`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let p = headers.iter().take_while(|h| h.starts_with('x')).count();
        let q = headers.len() - p;
        for (i, h) in headers.iter().enumerate() {
            let want = if i < p { format!("x{}", i + 1) } else { format!("y{}", i - p + 1) };
            if h != want {
                return Err(SgameError::InvalidDataset(format!(
                    "header column {} is `{h}`, expected `{want}`",
                    i + 1
                )));
            }
        }
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    SgameError::InvalidDataset(format!("row {}: cannot parse `{field}`", line + 1))
                })?;
                if j < p {
                    x.push(T::lit(v));
                } else {
                    y.push(T::lit(v));
                }
            }
        }
        let n = x.len().checked_div(p).unwrap_or(y.len() / q.max(1));
        Dataset::new(Matrix::from_vec(n, p, x), Matrix::from_vec(n, q, y))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<String> = (1..=self.p())
            .map(|j| format!("x{j}"))
            .chain((1..=self.q()).map(|z| format!("y{z}")))
            .collect();
        w.write_record(&header)?;
        for i in 0..self.n() {
            let rec: Vec<String> = self.x(i).iter().chain(self.y(i)).map(|v| v.to_string()).collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn to_path(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    /// Every row repeated `times` times in place.
    pub fn repeated(&self, times: usize) -> Self {
        let idx: Vec<usize> = (0..self.n()).flat_map(|i| std::iter::repeat_n(i, times)).collect();
        self.select(&idx)
    }

    /// Rows at the given indices.
    pub fn select(&self, idx: &[usize]) -> Self {
        let x = idx.iter().flat_map(|&i| self.x(i).iter().copied()).collect();
        let y = idx.iter().flat_map(|&i| self.y(i).iter().copied()).collect();
        Dataset {
            design: Matrix::from_vec(idx.len(), self.p(), x),
            responses: Matrix::from_vec(idx.len(), self.q(), y),
        }
    }
}

fn check_design<T: Scalar>(design: &Matrix<T>) -> Result<()> {
    for i in 0..design.rows() {
        for (j, &v) in design.row(i).iter().enumerate() {
            if !(v >= T::zero() && v <= T::one()) {
                return Err(SgameError::InvalidDataset(format!(
                    "design entry ({i}, {j}) = {v} is outside [0, 1]"
                )));
            }
        }
    }
    Ok(())
}

/// n×p design with i.i.d. U[0,1] entries.
pub fn uniform_design<T: Scalar, R: Rng + ?Sized>(n: usize, p: usize, rng: &mut R) -> Matrix<T> {
    let data = (0..n * p).map(|_| T::lit(rng.random::<f64>())).collect();
    Matrix::from_vec(n, p, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParameterBounds;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_out_of_range_design() {
        let x = Matrix::from_vec(1, 2, vec![0.5f64, 1.5]);
        let y = Matrix::from_vec(1, 1, vec![0.0]);
        assert!(Dataset::new(x, y).is_err());
        assert!(Dataset::new(Matrix::<f64>::zeros(0, 2), Matrix::zeros(0, 1)).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let psi = SgameParams::zeros(2, 1, ParameterBounds::new(1.0, 1.0, 0.5, 2.0, 2).unwrap());
        let d = Dataset::simulate(&psi, uniform_design(10, 2, &mut rng), &mut rng).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x1,x2,y1\n"));
        assert_eq!(text.lines().count(), 11);
        let back = Dataset::<f64>::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn csv_header_checked() {
        let bad = "x1,z1\n0.5,1.0\n";
        assert!(Dataset::<f64>::read_csv(bad.as_bytes()).is_err());
    }
}
