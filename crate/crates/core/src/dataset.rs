//! Capacity-vs-cycle data: loading, normalization and train/test slicing.
//!
//! Capacities are normalized per cell against the first observed value, so
//! every series that starts at a cell's first observation begins at exactly
//! `1.0`. The cycle axis is real-valued; elapsed time in days embeds as
//! naturally as integer cycle counts.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One cell's normalized capacity observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacitySeries {
    cell_id: String,
    cycles: Vec<f64>,
    capacities: Vec<f64>,
    raw_initial_capacity: f64,
}

impl CapacitySeries {
    /// Builds a series from raw capacities, normalizing against the first one.
    ///
    /// Cycles must already be strictly increasing.
    pub fn new(cell_id: impl Into<String>, cycles: Vec<f64>, raw_capacities: Vec<f64>) -> Result<Self> {
        let cell_id = cell_id.into();
        validate(&cell_id, &cycles, &raw_capacities)?;
        let first = raw_capacities[0];
        let capacities = raw_capacities.iter().map(|c| c / first).collect();
        Ok(Self { cell_id, cycles, capacities, raw_initial_capacity: first })
    }

    /// A contiguous slice of `self`, keeping the parent's normalization.
    ///
    /// The slice's first capacity is therefore only `1.0` when it starts at
    /// position zero.
    fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            cell_id: self.cell_id.clone(),
            cycles: self.cycles[range.clone()].to_vec(),
            capacities: self.capacities[range].to_vec(),
            raw_initial_capacity: self.raw_initial_capacity,
        }
    }

    pub fn cell_id(&self) -> &str {
        &self.cell_id
    }

    pub fn cycles(&self) -> &[f64] {
        &self.cycles
    }

    pub fn capacities(&self) -> &[f64] {
        &self.capacities
    }

    pub fn raw_initial_capacity(&self) -> f64 {
        self.raw_initial_capacity
    }

    pub fn len(&self) -> usize {
        self.cycles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cycles.is_empty()
    }

    /// True when every cycle value is integral (cycle counts rather than time).
    pub fn has_integer_cycles(&self) -> bool {
        self.cycles.iter().all(|x| x.fract() == 0.0)
    }

    /// The first `n` observations.
    pub fn head(&self, n: usize) -> Self {
        self.slice(0..n.min(self.len()))
    }

    /// Appends `other` to `self`. Used to undo a [`split`].
    pub fn concat(&self, other: &CapacitySeries) -> Result<Self> {
        if other.cell_id != self.cell_id {
            return Err(Error::Data {
                cell: self.cell_id.clone(),
                message: format!("cannot concatenate with cell `{}`", other.cell_id),
            });
        }
        let mut out = self.clone();
        out.cycles.extend_from_slice(&other.cycles);
        out.capacities.extend_from_slice(&other.capacities);
        if out.cycles.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data {
                cell: self.cell_id.clone(),
                message: "concatenation breaks cycle ordering".into(),
            });
        }
        Ok(out)
    }
}

fn validate(cell: &str, cycles: &[f64], capacities: &[f64]) -> Result<()> {
    let err = |message: String| Error::Data { cell: cell.to_string(), message };
    if cycles.is_empty() {
        return Err(err("no observations".into()));
    }
    if cycles.len() != capacities.len() {
        return Err(err(format!(
            "{} cycles but {} capacities",
            cycles.len(),
            capacities.len()
        )));
    }
    if let Some(x) = cycles.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(err(format!("cycle value {x} is not a finite non-negative number")));
    }
    if let Some(w) = cycles.windows(2).find(|w| w[0] >= w[1]) {
        let what = if w[0] == w[1] { "duplicate" } else { "non-monotone" };
        return Err(err(format!("{what} cycles {} and {}", w[0], w[1])));
    }
    if let Some(c) = capacities.iter().find(|c| !c.is_finite() || **c <= 0.0) {
        return Err(err(format!("capacity {c} is not a finite positive number")));
    }
    Ok(())
}

/// A group of cells sharing one model; labels run `1..=m` in list order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fleet {
    series: Vec<CapacitySeries>,
}

impl Fleet {
    pub fn new(series: Vec<CapacitySeries>) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::DegenerateInput("fleet has no cells".into()));
        }
        for (i, s) in series.iter().enumerate() {
            if series[..i].iter().any(|o| o.cell_id == s.cell_id) {
                return Err(Error::Data {
                    cell: s.cell_id.clone(),
                    message: "duplicate cell id in fleet".into(),
                });
            }
        }
        Ok(Self { series })
    }

    pub fn series(&self) -> &[CapacitySeries] {
        &self.series
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    /// Output labels, `1..=m`.
    pub fn labels(&self) -> Vec<usize> {
        (1..=self.series.len()).collect()
    }

    pub fn get(&self, cell_id: &str) -> Option<&CapacitySeries> {
        self.series.iter().find(|s| s.cell_id == cell_id)
    }

    pub fn label_of(&self, cell_id: &str) -> Option<usize> {
        self.series.iter().position(|s| s.cell_id == cell_id).map(|i| i + 1)
    }

    /// A new fleet containing only `cell_ids`, in the given order.
    pub fn select(&self, cell_ids: &[&str]) -> Result<Self> {
        let series = cell_ids
            .iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| Error::Bounds(format!("cell `{id}` not in fleet")))
            })
            .collect::<Result<Vec<_>>>()?;
        Fleet::new(series)
    }
}

/// Column names used when reading and writing CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub cell_id: String,
    pub cycle: String,
    pub capacity: String,
}

impl Default for Schema {
    fn default() -> Self {
        Self { cell_id: "cell_id".into(), cycle: "cycle".into(), capacity: "capacity".into() }
    }
}

impl Schema {
    /// Parses overrides of the form `cycle=days,capacity=cap_ah`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut schema = Schema::default();
        for pair in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::Schema(format!("expected key=value, got `{pair}`")))?;
            let value = value.trim().to_string();
            match key.trim() {
                "cell_id" => schema.cell_id = value,
                "cycle" => schema.cycle = value,
                "capacity" => schema.capacity = value,
                other => return Err(Error::Schema(format!("unknown schema key `{other}`"))),
            }
        }
        Ok(schema)
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Fleet> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<Fleet> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let (id_col, cycle_col, cap_col) =
        (column(&schema.cell_id)?, column(&schema.cycle)?, column(&schema.capacity)?);

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(f64, f64)>> = HashMap::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let id = record.get(id_col).unwrap_or_default().to_string();
        let parse = |col: usize, what: &str| -> Result<f64> {
            let raw = record.get(col).unwrap_or_default();
            raw.parse::<f64>().map_err(|_| Error::Data {
                cell: id.clone(),
                message: format!("row {}: cannot parse {what} `{raw}`", line + 2),
            })
        };
        let cycle = parse(cycle_col, "cycle")?;
        let capacity = parse(cap_col, "capacity")?;
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        rows.entry(id).or_default().push((cycle, capacity));
    }

    let series = order
        .into_iter()
        .map(|id| {
            let mut obs = rows.remove(&id).unwrap_or_default();
            obs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (cycles, caps): (Vec<f64>, Vec<f64>) = obs.into_iter().unzip();
            CapacitySeries::new(id, cycles, caps)
        })
        .collect::<Result<Vec<_>>>()?;
    Fleet::new(series)
}

/// Writes normalized capacities; reading the output back reproduces the
/// same cycle and capacity values bit for bit.
pub fn write_csv<W: Write>(writer: W, fleet: &Fleet, schema: &Schema) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([&schema.cell_id, &schema.cycle, &schema.capacity])?;
    for s in fleet.series() {
        for (x, y) in s.cycles.iter().zip(&s.capacities) {
            wtr.write_record([s.cell_id.as_str(), &x.to_string(), &y.to_string()])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Where to cut a series and which capacity counts as end of life.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Number of observations used for training.
    pub current: usize,
    pub eol_threshold: f64,
}

impl SplitSpec {
    pub fn new(current: usize, eol_threshold: f64) -> Result<Self> {
        if !(eol_threshold > 0.0 && eol_threshold < 1.0) {
            return Err(Error::Config(format!("EoL threshold {eol_threshold} not in (0, 1)")));
        }
        Ok(Self { current, eol_threshold })
    }

    pub fn check(&self, series: &CapacitySeries) -> Result<()> {
        if self.current < 1 || self.current >= series.len() {
            return Err(Error::Bounds(format!(
                "current cycle index {} outside 1..{} for cell `{}`",
                self.current,
                series.len(),
                series.cell_id
            )));
        }
        Ok(())
    }
}

/// Training prefix (first `c` observations) and the remaining test suffix.
pub fn split(series: &CapacitySeries, spec: &SplitSpec) -> Result<(CapacitySeries, CapacitySeries)> {
    spec.check(series)?;
    let c = spec.current;
    Ok((series.slice(0..c), series.slice(c..series.len())))
}

/// One split for every `c` from `ceil(start_fraction * N)` to `N - 1`.
pub fn rolling_origins(
    series: &CapacitySeries,
    start_fraction: f64,
    eol_threshold: f64,
) -> Result<Vec<SplitSpec>> {
    if !(start_fraction > 0.0 && start_fraction < 1.0) {
        return Err(Error::Config(format!("start fraction {start_fraction} not in (0, 1)")));
    }
    let n = series.len();
    let first = ((start_fraction * n as f64).ceil() as usize).max(1);
    let specs = (first..n)
        .map(|c| SplitSpec::new(c, eol_threshold))
        .collect::<Result<Vec<_>>>()?;
    if specs.is_empty() {
        return Err(Error::DegenerateInput(format!(
            "cell `{}` with {n} points has no split at start fraction {start_fraction}",
            series.cell_id
        )));
    }
    Ok(specs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(n: usize) -> CapacitySeries {
        let cycles = (1..=n).map(|i| i as f64).collect();
        let caps = (0..n).map(|i| 2.0 - 1e-3 * i as f64).collect();
        CapacitySeries::new("A1", cycles, caps).unwrap()
    }

    #[test]
    fn normalizes_against_first_capacity() {
        let csv = "cell_id,cycle,capacity\nA1,1,1.85\nA1,2,1.80\nA1,3,1.76\n";
        let fleet = read_csv(csv.as_bytes(), &Schema::default()).unwrap();
        let s = &fleet.series()[0];
        assert_eq!(s.capacities()[0], 1.0);
        assert!((s.capacities()[1] - 1.80 / 1.85).abs() < 1e-15);
        assert!((s.capacities()[1] - 0.972_972_972_972_973).abs() < 1e-12);
        assert!((s.capacities()[2] - 0.951_351_351_351_351).abs() < 1e-12);
        assert_eq!(s.raw_initial_capacity(), 1.85);
    }

    #[test]
    fn two_cells_get_labels_in_order() {
        let csv = "cell_id,cycle,capacity\nB,1,1.0\nA,1,2.0\nB,2,0.9\nA,2,1.9\n";
        let fleet = read_csv(csv.as_bytes(), &Schema::default()).unwrap();
        assert_eq!(fleet.len(), 2);
        assert_eq!(fleet.labels(), vec![1, 2]);
        assert_eq!(fleet.label_of("B"), Some(1));
        assert_eq!(fleet.label_of("A"), Some(2));
    }

    #[test]
    fn rows_are_sorted_by_cycle() {
        let csv = "cell_id,cycle,capacity\nA,3,0.8\nA,1,1.0\nA,2,0.9\n";
        let fleet = read_csv(csv.as_bytes(), &Schema::default()).unwrap();
        assert_eq!(fleet.series()[0].cycles(), &[1.0, 2.0, 3.0]);
        assert_eq!(fleet.series()[0].capacities()[2], 0.8);
    }

    #[test]
    fn schema_overrides_and_errors() {
        let csv = "battery,days,cap\nC1,0.5,2.1\nC1,4.0,2.0\n";
        let schema = Schema::parse("cell_id=battery,cycle=days,capacity=cap").unwrap();
        let fleet = read_csv(csv.as_bytes(), &schema).unwrap();
        assert_eq!(fleet.series()[0].cycles(), &[0.5, 4.0]);

        let err = read_csv(csv.as_bytes(), &Schema::default()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
        assert!(Schema::parse("volts=v").is_err());
    }

    #[test]
    fn duplicate_cycles_and_bad_capacity_are_data_errors() {
        let dup = "cell_id,cycle,capacity\nA,1,1.0\nX,1,1.0\nX,1,0.9\n";
        match read_csv(dup.as_bytes(), &Schema::default()).unwrap_err() {
            Error::Data { cell, .. } => assert_eq!(cell, "X"),
            other => panic!("unexpected {other}"),
        }
        let neg = "cell_id,cycle,capacity\nA,1,1.0\nA,2,0\n";
        assert!(matches!(
            read_csv(neg.as_bytes(), &Schema::default()).unwrap_err(),
            Error::Data { .. }
        ));
    }

    #[test]
    fn split_lengths_and_partition() {
        let s = series(10);
        let (train, test) = split(&s, &SplitSpec::new(4, 0.7).unwrap()).unwrap();
        assert_eq!((train.len(), test.len()), (4, 6));
        assert_eq!(train.concat(&test).unwrap(), s);

        let (_, test) = split(&s, &SplitSpec::new(9, 0.7).unwrap()).unwrap();
        assert_eq!(test.len(), 1);

        assert!(matches!(split(&s, &SplitSpec::new(10, 0.7).unwrap()), Err(Error::Bounds(_))));
        assert!(matches!(split(&s, &SplitSpec::new(0, 0.7).unwrap()), Err(Error::Bounds(_))));
    }

    #[test]
    fn rolling_origin_ranges() {
        let specs = rolling_origins(&series(100), 0.2, 0.7).unwrap();
        assert_eq!(specs.len(), 80);
        assert_eq!(specs.first().unwrap().current, 20);
        assert_eq!(specs.last().unwrap().current, 99);

        let cs: Vec<_> = rolling_origins(&series(10), 0.5, 0.7)
            .unwrap()
            .iter()
            .map(|s| s.current)
            .collect();
        assert_eq!(cs, vec![5, 6, 7, 8, 9]);

        assert!(matches!(rolling_origins(&series(3), 0.9, 0.7), Err(Error::DegenerateInput(_))));
        assert!(rolling_origins(&series(10), 1.0, 0.7).is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_bit_exact(
            raw in proptest::collection::vec(0.01f64..10.0, 1..30),
            gaps in proptest::collection::vec(0.001f64..50.0, 30),
        ) {
            let mut x = 0.0;
            let cycles: Vec<f64> = raw.iter().zip(&gaps).map(|(_, g)| { x += g; x }).collect();
            let s = CapacitySeries::new("cell", cycles, raw.clone()).unwrap();
            let fleet = Fleet::new(vec![s]).unwrap();
            let mut buf = Vec::new();
            write_csv(&mut buf, &fleet, &Schema::default()).unwrap();
            let back = read_csv(buf.as_slice(), &Schema::default()).unwrap();
            prop_assert_eq!(back.series()[0].cycles(), fleet.series()[0].cycles());
            prop_assert_eq!(back.series()[0].capacities(), fleet.series()[0].capacities());

            // normalizing a normalized series is a no-op
            let again = CapacitySeries::new("cell", back.series()[0].cycles().to_vec(),
                back.series()[0].capacities().to_vec()).unwrap();
            prop_assert_eq!(again.capacities(), back.series()[0].capacities());
        }

        #[test]
        fn rolling_splits_are_in_range(n in 2usize..300, frac in 0.01f64..0.99) {
            let s = series(n);
            if let Ok(specs) = rolling_origins(&s, frac, 0.7) {
                for spec in specs {
                    prop_assert!(spec.current >= 1 && spec.current < n);
                    prop_assert!(split(&s, &spec).is_ok());
                }
            }
        }
    }
}
