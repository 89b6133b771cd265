//! File formats: observation and trajectory CSV, and a JSON container for
//! skeleton matrices, emissions and HMMs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{build_hmm, HmmModel};
use crate::lattice::Lattice;
use crate::params::EiState;
use crate::sim::{Event, EventKind, ObservationSeries, Trajectory};
use crate::skeleton::{EmissionTable, SkeletonMatrix};

/// Writes `n,y` rows, `n` counting windows from 1.
pub fn write_observations<W: Write>(obs: &ObservationSeries, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["n", "y"])?;
    for (n, y) in obs.values.iter().enumerate() {
        out.write_record([(n + 1).to_string(), y.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_observations<R: Read>(r: R, dt: f64) -> Result<ObservationSeries> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut values = Vec::new();
    for (k, rec) in rdr.deserialize::<(usize, u32)>().enumerate() {
        let (n, y) = rec?;
        if n != k + 1 {
            return Err(Error::Shape(format!("observation row {} has index {n}", k + 1)));
        }
        values.push(y);
    }
    ObservationSeries::new(dt, values)
}

/// Writes `t,kind,e,i` rows: an `initial` row at time 0, one row per event
/// with the state after it, and an `end` row at the horizon.
pub fn write_trajectory<W: Write>(t: &Trajectory, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "kind", "e", "i"])?;
    let row = |time: f64, kind: &str, s: EiState| [time.to_string(), kind.to_string(), s.e.to_string(), s.i.to_string()];
    out.write_record(row(0.0, "initial", t.initial))?;
    for ev in &t.events {
        out.write_record(row(ev.time, ev.kind.as_str(), ev.state))?;
    }
    out.write_record(row(t.horizon, "end", t.final_state()))?;
    out.flush()?;
    Ok(())
}

pub fn read_trajectory<R: Read>(r: R) -> Result<Trajectory> {
    let mut rdr = csv::Reader::from_reader(r);
    let rows: Vec<(f64, String, u32, u32)> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    let bad = |m: &str| Error::Shape(format!("trajectory file: {m}"));
    let (first, rest) = rows.split_first().ok_or_else(|| bad("empty"))?;
    let (last, middle) = rest.split_last().ok_or_else(|| bad("missing end row"))?;
    if first.1 != "initial" || last.1 != "end" {
        return Err(bad("expected initial and end rows"));
    }
    let mut events = Vec::with_capacity(middle.len());
    for (time, kind, e, i) in middle {
        let kind = EventKind::parse(kind).ok_or_else(|| bad(&format!("unknown event kind {kind}")))?;
        events.push(Event { time: *time, kind, state: EiState::new(*e, *i) });
    }
    let cumulative_isolations = events.iter().filter(|e| e.kind == EventKind::Isolation).count() as u64;
    let t = Trajectory { initial: EiState::new(first.2, first.3), events, horizon: last.0, cumulative_isolations };
    t.check()?;
    if t.final_state() != EiState::new(last.2, last.3) {
        return Err(bad("end row disagrees with the last event"));
    }
    Ok(t)
}

/// JSON container. Arrays are flattened row-major in the lattice layout:
/// pairs `e * (N + 1) + i`, triples `pair * (N + 1) + j`; `transition` is
/// `pairs x pairs`, `emission` is `triples x (m_obs + 1)`, `q` is
/// `triples x pairs` with column `pair(e', j')` for target `(e', j, j')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelContainer {
    pub n_state: u32,
    pub e_max: u32,
    pub m_obs: Option<u32>,
    pub transition: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub emission: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub q: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rho: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pi: Option<Vec<f64>>,
}

impl ModelContainer {
    pub fn from_skeleton(m: &SkeletonMatrix, psi: Option<&EmissionTable>) -> Self {
        Self {
            n_state: m.lattice.i_max,
            e_max: m.lattice.e_max,
            m_obs: psi.map(|p| p.m_obs),
            transition: m.probs.clone(),
            emission: psi.map(|p| p.probs.clone()),
            q: None,
            rho: None,
            pi: None,
        }
    }

    pub fn from_hmm(h: &HmmModel) -> Self {
        Self {
            q: Some(h.q.clone()),
            rho: Some(h.rho.clone()),
            pi: Some(h.pi.clone()),
            ..Self::from_skeleton(&h.skeleton, Some(&h.psi))
        }
    }

    pub fn lattice(&self) -> Lattice {
        Lattice::new(self.e_max, self.n_state)
    }

    pub fn skeleton(&self) -> Result<SkeletonMatrix> {
        SkeletonMatrix::new(self.lattice(), self.transition.clone())
    }

    pub fn emissions(&self) -> Result<Option<EmissionTable>> {
        match (&self.emission, self.m_obs) {
            (Some(p), Some(m)) => Ok(Some(EmissionTable::new(self.lattice(), m, p.clone())?)),
            (None, _) => Ok(None),
            (Some(_), None) => Err(Error::Shape("emission array without m_obs".into())),
        }
    }

    /// Rebuilds the HMM from the skeleton, emissions and initial law.
    pub fn hmm(&self) -> Result<HmmModel> {
        let psi = self.emissions()?.ok_or_else(|| Error::Shape("container has no emissions".into()))?;
        let pi = self.pi.clone().ok_or_else(|| Error::Shape("container has no initial law".into()))?;
        build_hmm(&self.skeleton()?, &psi, &pi)
    }
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}
