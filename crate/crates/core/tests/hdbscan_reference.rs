//! HDBSCAN partitions compared against frozen scikit-learn 1.7.2 outputs.

use std::path::Path;

use emseg::clustering::hdbscan;
use emseg::EmbeddingField;

struct Case {
    field: EmbeddingField,
    min_size: usize,
    /// -1 is noise.
    expected: Vec<i64>,
}

fn load(name: &str) -> Case {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    let head: Vec<usize> =
        lines.next().unwrap().split_whitespace().map(|v| v.parse().unwrap()).collect();
    let (n, d, min_size) = (head[0], head[1], head[2]);
    let mut data = Vec::with_capacity(n * d);
    let mut expected = Vec::with_capacity(n);
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        data.extend(parts[..d].iter().map(|v| v.parse::<f64>().unwrap()));
        expected.push(parts[d].parse().unwrap());
    }
    Case { field: EmbeddingField::new(1, n, d, data).unwrap(), min_size, expected }
}

fn check(name: &str) {
    let case = load(name);
    let got = hdbscan(&case.field, case.min_size).unwrap();
    let labels = got.labels.labels();
    let n = labels.len();
    for i in 0..n {
        assert_eq!(labels[i] == 0, case.expected[i] == -1, "{name}: noise mismatch at {i}");
        for j in 0..n {
            if labels[i] != 0 && labels[j] != 0 {
                assert_eq!(
                    labels[i] == labels[j],
                    case.expected[i] == case.expected[j],
                    "{name}: co-membership mismatch at ({i}, {j})"
                );
            }
        }
    }
}

#[test]
fn uniform_scatter() {
    check("hdbscan_uniform_scatter.txt");
}

#[test]
fn three_blobs_with_noise() {
    check("hdbscan_three_blobs_noise.txt");
}

#[test]
fn mixed_density() {
    check("hdbscan_mixed_density.txt");
}

#[test]
fn nested_blobs() {
    check("hdbscan_nested.txt");
}

#[test]
fn lattice_is_all_noise() {
    check("hdbscan_lattice_1d.txt");
    check("hdbscan_lattice_2d.txt");
}

#[test]
fn sparse_scatter_is_all_noise() {
    check("hdbscan_sparse_scatter.txt");
    let case = load("hdbscan_sparse_scatter.txt");
    let got = hdbscan(&case.field, case.min_size).unwrap();
    assert!(got.labels.labels().iter().all(|&l| l == 0));
}
