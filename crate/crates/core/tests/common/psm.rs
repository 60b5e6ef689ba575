//! Write a dataset in the PSM directory layout: `train.csv` and `test.csv`
//! with a leading `timestamp_(min)` column, labels in `test_label.csv`.

use std::fmt::Write as _;
use std::path::Path;

use cgsta::dataio::TimeSeries;
use cgsta::synth::SynthOutput;

fn table(series: &TimeSeries, t0: usize, holes: &[(usize, usize)]) -> String {
    let mut out = String::from("timestamp_(min)");
    for v in 0..series.n_vars() {
        let _ = write!(out, ",feature_{v}");
    }
    out.push('\n');
    for t in 0..series.len() {
        let _ = write!(out, "{}.0", t0 + t);
        for (v, x) in series.row(t).iter().enumerate() {
            if holes.contains(&(t, v)) {
                out.push(',');
            } else {
                let _ = write!(out, ",{x}");
            }
        }
        out.push('\n');
    }
    out
}

/// Writes the three files; `holes` are `(row, column)` training cells left
/// empty, as in the released PSM training file.
pub fn write_psm_dir(dir: &Path, data: &SynthOutput, holes: &[(usize, usize)]) {
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join("train.csv"), table(&data.train, 0, holes)).unwrap();
    let t0 = data.train.len();
    std::fs::write(dir.join("test.csv"), table(&data.test, t0, &[])).unwrap();
    let mut labels = String::from("timestamp_(min),label\n");
    for (t, l) in data.test.labels.as_ref().unwrap().iter().enumerate() {
        let _ = writeln!(labels, "{}.0,{l}", t0 + t);
    }
    std::fs::write(dir.join("test_label.csv"), labels).unwrap();
}
