//! Per-strategy summaries of a metrics CSV.

use std::collections::BTreeMap;
use std::io::Read;

use oppfl::sim::CSV_HEADER;
use serde::Deserialize;

#[derive(Debug, Deserialize)]
struct Row {
    sim_time_s: f64,
    #[allow(dead_code)]
    encounter_idx: usize,
    device_id: usize,
    strategy: String,
    goal_accuracy: f64,
    #[allow(dead_code)]
    alpha: f64,
    #[allow(dead_code)]
    gamma_size: usize,
    bytes_sent: u64,
    engaged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub strategy: String,
    pub devices: usize,
    pub rows: usize,
    /// Final accuracy: the last row of each device.
    pub final_mean: f64,
    pub final_min: f64,
    pub final_max: f64,
    pub total_bytes: u64,
    pub engagement_rate: f64,
}

pub fn summarize<R: Read>(input: R) -> Result<Vec<Summary>, String> {
    let mut reader = csv::Reader::from_reader(input);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .map(str::to_string)
        .collect();
    if header.join(",") != CSV_HEADER {
        return Err(format!(
            "unexpected columns '{}', expected '{CSV_HEADER}'",
            header.join(",")
        ));
    }
    // strategy -> (device -> (time, accuracy) of its latest row, rows, bytes, engaged rows)
    type Acc = (BTreeMap<usize, (f64, f64)>, usize, u64, usize);
    let mut groups: BTreeMap<String, Acc> = BTreeMap::new();
    for (i, record) in reader.deserialize::<Row>().enumerate() {
        let row = record.map_err(|e| format!("row {}: {e}", i + 1))?;
        let g = groups.entry(row.strategy.clone()).or_default();
        let last = g.0.entry(row.device_id).or_insert((f64::NEG_INFINITY, 0.0));
        if row.sim_time_s >= last.0 {
            *last = (row.sim_time_s, row.goal_accuracy);
        }
        g.1 += 1;
        g.2 += row.bytes_sent;
        g.3 += row.engaged as usize;
    }
    Ok(groups
        .into_iter()
        .map(|(strategy, (finals, rows, bytes, engaged))| {
            let accs: Vec<f64> = finals.values().map(|v| v.1).collect();
            Summary {
                strategy,
                devices: accs.len(),
                rows,
                final_mean: accs.iter().sum::<f64>() / accs.len() as f64,
                final_min: accs.iter().copied().fold(f64::INFINITY, f64::min),
                final_max: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                total_bytes: bytes,
                engagement_rate: engaged as f64 / rows as f64,
            }
        })
        .collect())
}

pub fn render(summaries: &[Summary]) -> String {
    let mut out = format!(
        "{:<24} {:>7} {:>7} {:>10} {:>10} {:>10} {:>14} {:>10}\n",
        "strategy",
        "devices",
        "rows",
        "final_mean",
        "final_min",
        "final_max",
        "bytes_sent",
        "engaged"
    );
    for s in summaries {
        out.push_str(&format!(
            "{:<24} {:>7} {:>7} {:>10.4} {:>10.4} {:>10.4} {:>14} {:>10.4}\n",
            s.strategy,
            s.devices,
            s.rows,
            s.final_mean,
            s.final_min,
            s.final_max,
            s.total_bytes,
            s.engagement_rate
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_row() {
        let csv = format!("{CSV_HEADER}\n3.5,1,0,greedy-sim,0.625,0.8,1,4096,true\n");
        let s = summarize(csv.as_bytes()).unwrap();
        assert_eq!(
            s,
            vec![Summary {
                strategy: "greedy-sim".into(),
                devices: 1,
                rows: 1,
                final_mean: 0.625,
                final_min: 0.625,
                final_max: 0.625,
                total_bytes: 4096,
                engagement_rate: 1.0,
            }]
        );
    }

    #[test]
    fn groups_and_finals() {
        let csv = format!(
            "{CSV_HEADER}\n1,1,0,local,0.5,0.9,0,0,false\n1,1,1,local,0.7,0.9,0,0,false\n2,2,0,local,0.4,0.9,0,0,false\n2,2,1,local,0.6,0.9,0,0,false\n"
        );
        let s = &summarize(csv.as_bytes()).unwrap()[0];
        assert_eq!((s.devices, s.rows, s.total_bytes), (2, 4, 0));
        assert!((s.final_mean - 0.5).abs() < 1e-12);
        assert_eq!(
            (s.final_min, s.final_max, s.engagement_rate),
            (0.4, 0.6, 0.0)
        );
    }

    #[test]
    fn schema_mismatch() {
        assert!(summarize("a,b\n1,2\n".as_bytes()).is_err());
        let bad = format!("{CSV_HEADER}\n1,1,0,local,notanumber,0.9,0,0,false\n");
        assert!(summarize(bad.as_bytes()).is_err());
    }
}
