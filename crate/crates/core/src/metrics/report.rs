use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Motion metrics over all windows and over the high-uncertainty subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub method: String,
    #[serde(rename = "ADE")]
    pub ade: f64,
    #[serde(rename = "FDE")]
    pub fde: f64,
    #[serde(rename = "L1")]
    pub l1: f64,
    #[serde(rename = "ADE_highU")]
    pub ade_high: f64,
    #[serde(rename = "FDE_highU")]
    pub fde_high: f64,
    #[serde(rename = "L1_highU")]
    pub l1_high: f64,
    /// False for methods whose trajectory numbers are reported for
    /// completeness only.
    pub comparable: bool,
}

/// Uncertainty metrics; undefined values are left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub method: String,
    #[serde(rename = "MAE")]
    pub mae: Option<f64>,
    pub rho: Option<f64>,
    pub precision: Option<f64>,
    pub delta_u: Option<f64>,
    pub effect: Option<f64>,
}

/// Behaviour-conditioned mean uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table3Row {
    pub behavior: String,
    pub mean_u: f64,
    pub effect: Option<f64>,
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<T>, _>>()?)
}

pub fn write_table1(path: &Path, rows: &[Table1Row]) -> Result<()> {
    write_rows(path, rows)
}

pub fn write_table2(path: &Path, rows: &[Table2Row]) -> Result<()> {
    write_rows(path, rows)
}

pub fn write_table3(path: &Path, rows: &[Table3Row]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_table1(path: &Path) -> Result<Vec<Table1Row>> {
    read_rows(path)
}

pub fn read_table2(path: &Path) -> Result<Vec<Table2Row>> {
    read_rows(path)
}

pub fn read_table3(path: &Path) -> Result<Vec<Table3Row>> {
    read_rows(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t1 = vec![Table1Row {
            method: "const_vel".into(),
            ade: 0.123456789,
            fde: 0.2,
            l1: 0.3,
            ade_high: 0.4,
            fde_high: 0.5,
            l1_high: 0.6,
            comparable: true,
        }];
        let t2 = vec![
            Table2Row {
                method: "egocognav".into(),
                mae: Some(0.1),
                rho: Some(0.7),
                precision: Some(0.5),
                delta_u: Some(0.2),
                effect: Some(1.1),
            },
            Table2Row {
                method: "m_transformer".into(),
                mae: None,
                rho: None,
                precision: None,
                delta_u: None,
                effect: None,
            },
        ];
        let t3 = vec![Table3Row {
            behavior: "HES".into(),
            mean_u: 0.39,
            effect: None,
        }];
        let (p1, p2, p3) = (dir.path().join("1.csv"), dir.path().join("2.csv"), dir.path().join("3.csv"));
        write_table1(&p1, &t1).unwrap();
        write_table2(&p2, &t2).unwrap();
        write_table3(&p3, &t3).unwrap();
        assert_eq!(read_table1(&p1).unwrap(), t1);
        assert_eq!(read_table2(&p2).unwrap(), t2);
        assert_eq!(read_table3(&p3).unwrap(), t3);
        let header = std::fs::read_to_string(&p2).unwrap();
        assert!(header.starts_with("method,MAE,rho,precision,delta_u,effect\n"));
        assert!(std::fs::read_to_string(&p3).unwrap().starts_with("behavior,mean_u,effect\n"));
    }
}
