use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ImagePlane;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub x: usize,
    pub y: usize,
    /// Microseconds.
    pub t: i64,
    /// +1 or -1.
    pub polarity: i8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    sensor_shape: (usize, usize),
}

impl EventStream {
    pub fn new(events: Vec<Event>, sensor_shape: (usize, usize)) -> Result<Self> {
        let (h, w) = sensor_shape;
        if h == 0 || w == 0 {
            return Err(Error::config("event sensor shape must be positive"));
        }
        for (i, e) in events.iter().enumerate() {
            if e.x >= w || e.y >= h {
                return Err(Error::config(format!(
                    "event {i} at ({}, {}) outside {h}x{w} sensor",
                    e.x, e.y
                )));
            }
            if e.polarity != 1 && e.polarity != -1 {
                return Err(Error::config(format!("event {i} has polarity {}", e.polarity)));
            }
        }
        if events.windows(2).any(|p| p[1].t < p[0].t) {
            return Err(Error::config("event timestamps must be non-decreasing"));
        }
        Ok(Self {
            events,
            sensor_shape,
        })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn sensor_shape(&self) -> (usize, usize) {
        self.sensor_shape
    }

    /// `(first, last)` timestamps, if any events exist.
    pub fn time_span(&self) -> Option<(i64, i64)> {
        Some((self.events.first()?.t, self.events.last()?.t))
    }
}

/// Signed polarity histogram over `[t_start, t_end)` without normalisation.
pub(crate) fn polarity_histogram(stream: &EventStream, t_start: i64, t_end: i64) -> Array3<f64> {
    let (h, w) = stream.sensor_shape;
    let mut acc = Array3::zeros((h, w, 1));
    let lo = stream.events.partition_point(|e| e.t < t_start);
    for e in stream.events[lo..].iter().take_while(|e| e.t < t_end) {
        acc[[e.y, e.x, 0]] += f64::from(e.polarity);
    }
    acc
}

/// Integrates events in `[t_start, t_end)` into a single-channel plane of
/// signed polarity counts, scaled so the largest magnitude is 1.
pub fn integrate_events(stream: &EventStream, t_start: i64, t_end: i64) -> Result<ImagePlane> {
    if t_start >= t_end {
        return Err(Error::config(format!(
            "event window [{t_start}, {t_end}) is empty"
        )));
    }
    let mut acc = polarity_histogram(stream, t_start, t_end);
    let peak = acc.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        acc.mapv_inplace(|v| v / peak);
    }
    ImagePlane::new(acc)
}

/// Reads `x,y,t,polarity` rows (header optional).
pub fn read_events_csv(path: &Path, sensor_shape: (usize, usize)) -> Result<EventStream> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let mut events = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        if line == 0 && rec.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        let field = |i: usize| -> Result<&str> {
            rec.get(i).ok_or_else(|| {
                Error::config(format!("{}:{}: expected 4 columns", path.display(), line + 1))
            })
        };
        let bad = |what: &str| Error::config(format!("{}:{}: bad {what}", path.display(), line + 1));
        let polarity: i64 = field(3)?.parse().map_err(|_| bad("polarity"))?;
        events.push(Event {
            x: field(0)?.parse().map_err(|_| bad("x"))?,
            y: field(1)?.parse().map_err(|_| bad("y"))?,
            t: field(2)?.parse().map_err(|_| bad("t"))?,
            // Some sensors write polarity as 0/1.
            polarity: if polarity > 0 { 1 } else { -1 },
        });
    }
    EventStream::new(events, sensor_shape)
}
