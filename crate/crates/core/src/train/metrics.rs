use rob_tensor::Matrix;

use crate::data::Image;
use crate::error::Result;
use crate::models::ModelBundle;
use crate::objectives::mean_kl;

/// Mean cosine similarity over all pairs of distinct rows. Approaches 1 as
/// the rows become identical.
pub fn mean_pairwise_cosine(rows: &Matrix) -> f64 {
    let n = rows.rows();
    if n < 2 {
        return 1.0;
    }
    let norms: Vec<f64> = (0..n)
        .map(|r| {
            rows.row(r)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(1e-12)
        })
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dot: f64 = rows
                .row(i)
                .iter()
                .zip(rows.row(j))
                .map(|(a, b)| a * b)
                .sum();
            total += dot / (norms[i] * norms[j]);
        }
    }
    total / (n * (n - 1) / 2) as f64
}

/// Mean `KL(teacher ‖ student)` of head distributions on the given images.
pub fn teacher_student_kl(
    teacher: &ModelBundle,
    student: &ModelBundle,
    images: &[&Image],
    teacher_temp: f64,
    student_temp: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in images.chunks(32) {
        let t = teacher.probabilities(chunk, teacher_temp)?;
        let s = student.probabilities(chunk, student_temp)?;
        total += mean_kl(&t, &s) * chunk.len() as f64;
    }
    Ok(total / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_extremes() {
        let same = Matrix::from_rows(&[vec![0.2, 0.8], vec![0.2, 0.8], vec![0.2, 0.8]]).unwrap();
        assert!((mean_pairwise_cosine(&same) - 1.0).abs() < 1e-12);
        let orth = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(mean_pairwise_cosine(&orth), 0.0);
    }
}
