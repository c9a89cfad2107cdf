//! Tab-separated feature files: `slide_id<TAB>patch_id<TAB>v1,v2,...`.
//! Values use the shortest decimal form that parses back to the same `f32`.

use std::path::Path;

use super::{read_file, write_file, PipelineError, Result};
use crate::attention::Cell;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub slide_id: String,
    pub cell: Cell,
    pub values: Vec<f32>,
}

pub fn patch_id(cell: Cell) -> String {
    format!("{}_{}", cell.0, cell.1)
}

pub fn parse_patch_id(s: &str) -> Option<Cell> {
    let (r, c) = s.split_once('_')?;
    Some((r.parse().ok()?, c.parse().ok()?))
}

pub fn format_rows(rows: &[FeatureRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&r.slide_id);
        out.push('\t');
        out.push_str(&patch_id(r.cell));
        out.push('\t');
        for (i, v) in r.values.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn write_features(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    write_file(path, format_rows(rows).as_bytes())
}

pub fn parse_rows(text: &str, path: &Path) -> Result<Vec<FeatureRow>> {
    let bad = |line: usize, detail: String| PipelineError::Record { path: path.into(), line, detail };
    let mut out = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split('\t').collect();
        let [slide, pid, vals] = parts[..] else {
            return Err(bad(i + 1, format!("expected 3 tab-separated fields, got {}", parts.len())));
        };
        let cell = parse_patch_id(pid).ok_or_else(|| bad(i + 1, format!("bad patch id {:?}", pid)))?;
        let values = vals
            .split(',')
            .map(|v| v.parse::<f32>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<f32>>>()
            .ok_or_else(|| bad(i + 1, "non-numeric or non-finite value".into()))?;
        if *dim.get_or_insert(values.len()) != values.len() {
            return Err(bad(i + 1, format!("{} values, earlier rows have {}", values.len(), dim.unwrap_or(0))));
        }
        out.push(FeatureRow { slide_id: slide.to_string(), cell, values });
    }
    Ok(out)
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureRow>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| PipelineError::Record { path: path.into(), line: 0, detail: e.to_string() })?;
    parse_rows(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_layout() {
        let rows = vec![
            FeatureRow { slide_id: "s01".into(), cell: (3, 12), values: vec![0.5, -1.25, 3e-8] },
            FeatureRow { slide_id: "s01".into(), cell: (0, 0), values: vec![1.0, 0.0, -0.0] },
        ];
        assert_eq!(format_rows(&rows), "s01\t3_12\t0.5,-1.25,0.00000003\ns01\t0_0\t1,0,-0\n");
        assert_eq!(parse_rows(&format_rows(&rows), Path::new("x")).unwrap(), rows);
    }

    #[test]
    fn malformed_lines_report_their_number() {
        let p = Path::new("f.tsv");
        for (text, line) in [("a\t1_2\t1,2\na\t1_3\t1\n", 2), ("a\t1-2\t1\n", 1), ("a\t0_0\t1,x\n", 1), ("a\t0_0\n", 1), ("a\t0_0\tNaN\n", 1)] {
            match parse_rows(text, p) {
                Err(PipelineError::Record { line: l, .. }) => assert_eq!(l, line, "{:?}", text),
                other => panic!("{:?} parsed: {:?}", text, other),
            }
        }
    }

    proptest! {
        #[test]
        fn floats_roundtrip_bit_exactly(vals in proptest::collection::vec(-1e30f32..1e30f32, 1..20), r in 0usize..500, c in 0usize..500) {
            let rows = vec![FeatureRow { slide_id: "z".into(), cell: (r, c), values: vals }];
            let back = parse_rows(&format_rows(&rows), Path::new("p")).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(back[0].cell, (r, c));
            for (a, b) in back[0].values.iter().zip(&rows[0].values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
