//! Event-camera voxelization.
//!
//! Events are hard-binned into `B·u` fine temporal panels, then every `u`
//! adjacent panels are summed into one of `B` output bins. Accumulation is
//! done in `i64` so that the grid total equals the polarity sum exactly.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub t: f64,
    pub x: u32,
    pub y: u32,
    /// `+1` or `−1`.
    pub p: i8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub height: usize,
    pub width: usize,
    /// `(t1, tN)`; `None` uses the first and last timestamps.
    pub window: Option<(f64, f64)>,
}

impl EventStream {
    /// Builds a stream with events sorted by timestamp (stable).
    pub fn new(mut events: Vec<Event>, height: usize, width: usize, window: Option<(f64, f64)>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!("sensor size {height}×{width}")));
        }
        if let Some(e) = events.iter().find(|e| !e.t.is_finite() || (e.p != 1 && e.p != -1)) {
            return Err(Error::InvalidArgument(format!("invalid event {e:?}")));
        }
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        Ok(Self {
            events,
            height,
            width,
            window,
        })
    }

    pub fn resolved_window(&self) -> (f64, f64) {
        match (self.window, self.events.first(), self.events.last()) {
            (Some(w), _, _) => w,
            (None, Some(a), Some(b)) => (a.t, b.t),
            _ => (0.0, 1.0),
        }
    }
}

/// Parses `t,x,y,p` lines. A non-numeric first line is taken as a header;
/// blank lines and lines starting with `#` are skipped.
pub fn parse_events_csv(text: &str, source: &str) -> Result<Vec<Event>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: source.to_string(),
            line: line_no,
            reason,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if out.is_empty() && line_no == 1 && fields[0].parse::<f64>().is_err() {
            continue;
        }
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields t,x,y,p, found {}", fields.len())));
        }
        let t: f64 = fields[0]
            .parse()
            .map_err(|_| err(format!("bad timestamp `{}`", fields[0])))?;
        if !t.is_finite() {
            return Err(err(format!("non-finite timestamp `{}`", fields[0])));
        }
        let x: u32 = fields[1].parse().map_err(|_| err(format!("bad x `{}`", fields[1])))?;
        let y: u32 = fields[2].parse().map_err(|_| err(format!("bad y `{}`", fields[2])))?;
        let p = match fields[3] {
            "1" | "+1" => 1,
            "-1" => -1,
            other => return Err(err(format!("polarity must be +1 or -1, got `{other}`"))),
        };
        out.push(Event { t, x, y, p });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    /// `H × W × B` signed polarity sums.
    pub counts: Vec<i64>,
    pub height: usize,
    pub width: usize,
    pub bins: usize,
    pub upscale: usize,
    pub retained: usize,
    pub rejected_spatial: usize,
    pub rejected_time: usize,
    /// Signed polarity sum of retained events.
    pub polarity_sum: i64,
}

impl VoxelGrid {
    pub fn total(&self) -> i64 {
        self.counts.iter().sum()
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            &[self.height, self.width, self.bins],
            self.counts.iter().map(|&v| v as f32).collect(),
        )
        .expect("grid extents are positive")
    }
}

/// Fine grid with `panels` temporal bins and no superimposition.
pub fn voxelize_fine(es: &EventStream, panels: usize) -> Result<VoxelGrid> {
    if panels == 0 {
        return Err(Error::InvalidArgument("at least one bin is required".into()));
    }
    let (t1, tn) = es.resolved_window();
    let dt = tn - t1;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "time window [{t1}, {tn}] must have positive length"
        )));
    }
    let mut grid = VoxelGrid {
        counts: vec![0; es.height * es.width * panels],
        height: es.height,
        width: es.width,
        bins: panels,
        upscale: 1,
        retained: 0,
        rejected_spatial: 0,
        rejected_time: 0,
        polarity_sum: 0,
    };
    for e in &es.events {
        if e.x as usize >= es.width || e.y as usize >= es.height {
            grid.rejected_spatial += 1;
            continue;
        }
        if e.t < t1 || e.t > tn {
            grid.rejected_time += 1;
            continue;
        }
        let k = (((e.t - t1) / dt * panels as f64).floor() as usize).min(panels - 1);
        grid.counts[(e.y as usize * es.width + e.x as usize) * panels + k] += e.p as i64;
        grid.retained += 1;
        grid.polarity_sum += e.p as i64;
    }
    Ok(grid)
}

/// Sums every `u` adjacent panels of a fine grid.
pub fn group_panels(fine: &VoxelGrid, u: usize) -> Result<VoxelGrid> {
    if u == 0 || !fine.bins.is_multiple_of(u) {
        return Err(Error::InvalidArgument(format!(
            "{} panels cannot be grouped by {u}",
            fine.bins
        )));
    }
    let bins = fine.bins / u;
    let counts = fine
        .counts
        .chunks(fine.bins)
        .flat_map(|px| px.chunks(u).map(|g| g.iter().sum::<i64>()))
        .collect();
    Ok(VoxelGrid {
        counts,
        bins,
        upscale: fine.upscale * u,
        ..fine.clone()
    })
}

/// Voxel grid with `bins` output channels built from `bins · upscale` fine panels.
pub fn voxelize(es: &EventStream, bins: usize, upscale: usize) -> Result<VoxelGrid> {
    if bins == 0 || upscale == 0 {
        return Err(Error::InvalidArgument(format!("bins = {bins}, upscale = {upscale}")));
    }
    group_panels(&voxelize_fine(es, bins * upscale)?, upscale)
}
