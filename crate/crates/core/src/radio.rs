//! Cellular physical-layer model: per-cell received power over a
//! multi-sector deployment, serving-sector selection, SINR, the normalized
//! SINR map folded into observations, MCS rates, and blackout detection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::gridworld::{Cell, GridMap};

/// SINR below this threshold cannot carry any data.
pub const BLACKOUT_THRESHOLD_DB: f64 = -8.47;
/// Upper edge of the [0, 1] SINR normalization window.
pub const SINR_NORM_MAX_DB: f64 = 25.0;

const ATTENUATION_MAX_DB: f64 = 30.0; // A_m
const SIDELOBE_V_DB: f64 = 30.0; // SLA_v

/// Multi-sector deployment and link-budget parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Deployment {
    /// Site ground positions in meters; empty means one site at map center.
    pub sites_m: Vec<(f64, f64)>,
    pub site_height_m: f64,
    /// One sector per azimuth (degrees, math convention) at every site.
    pub sector_azimuths_deg: Vec<f64>,
    pub tx_power_dbm: f64,
    pub carrier_ghz: f64,
    pub bandwidth_hz: f64,
    pub max_gain_dbi: f64,
    pub downtilt_deg: f64,
    pub h_beamwidth_deg: f64,
    pub v_beamwidth_deg: f64,
    pub agent_height_m: f64,
    pub shadow_sigma_los_db: f64,
    pub shadow_sigma_nlos_db: f64,
    pub decorr_los_m: f64,
    pub decorr_nlos_m: f64,
    /// Stored for completeness; does not enter the downlink SINR.
    pub bs_noise_fig_db: f64,
    pub agent_noise_fig_db: f64,
}

impl Default for Deployment {
    fn default() -> Self {
        Self {
            sites_m: Vec::new(),
            site_height_m: 35.0,
            sector_azimuths_deg: vec![0.0, 120.0, 240.0],
            tx_power_dbm: 46.0,
            carrier_ghz: 2.0,
            bandwidth_hz: 10e6,
            max_gain_dbi: 17.0,
            downtilt_deg: 8.0,
            h_beamwidth_deg: 65.0,
            v_beamwidth_deg: 10.0,
            agent_height_m: 1.5,
            shadow_sigma_los_db: 10.0,
            shadow_sigma_nlos_db: 10.0,
            decorr_los_m: 37.0,
            decorr_nlos_m: 50.0,
            bs_noise_fig_db: 5.0,
            agent_noise_fig_db: 7.0,
        }
    }
}

impl Deployment {
    /// Configured sites, or a single site at the map center.
    pub fn resolve_sites(&self, map: &GridMap) -> Vec<(f64, f64)> {
        if self.sites_m.is_empty() {
            let cs = map.cell_size_m();
            vec![(map.width() as f64 * cs / 2.0, map.height() as f64 * cs / 2.0)]
        } else {
            self.sites_m.clone()
        }
    }

    /// Thermal noise floor at the agent receiver in dBm.
    pub fn noise_floor_dbm(&self) -> f64 {
        -174.0 + 10.0 * self.bandwidth_hz.log10() + self.agent_noise_fig_db
    }

    fn cell_center_m(&self, map: &GridMap, cell: Cell) -> (f64, f64) {
        let cs = map.cell_size_m();
        ((cell.0 as f64 + 0.5) * cs, (cell.1 as f64 + 0.5) * cs)
    }
}

/// 3GPP-style sectored antenna pattern.
///
/// `A(phi, theta) = G_max - min(-(A_h + A_v), A_m)` with parabolic rolloff
/// in both planes, 30 dB front-to-back and sidelobe floors.
pub fn antenna_gain(dep: &Deployment, map: &GridMap, site_m: (f64, f64), azimuth_deg: f64, cell: Cell) -> f64 {
    let (cx, cy) = dep.cell_center_m(map, cell);
    let dx = cx - site_m.0;
    let dy = cy - site_m.1;
    let d2d = dx.hypot(dy).max(1e-9);
    let bearing = dy.atan2(dx).to_degrees();
    let mut phi = bearing - azimuth_deg;
    while phi > 180.0 {
        phi -= 360.0;
    }
    while phi < -180.0 {
        phi += 360.0;
    }
    // positive theta points below the horizon, like the downtilt
    let theta = (dep.site_height_m - dep.agent_height_m).atan2(d2d).to_degrees();
    let a_h = -(12.0 * (phi / dep.h_beamwidth_deg).powi(2)).min(ATTENUATION_MAX_DB);
    let a_v = -(12.0 * ((theta - dep.downtilt_deg) / dep.v_beamwidth_deg).powi(2)).min(SIDELOBE_V_DB);
    dep.max_gain_dbi - (-(a_h + a_v)).min(ATTENUATION_MAX_DB)
}

/// Urban-micro line-of-sight path loss closed form (no floor, no shadowing).
pub fn umi_los_db(d_m: f64, f_ghz: f64) -> f64 {
    22.0 * d_m.log10() + 28.0 + 20.0 * f_ghz.log10()
}

/// Urban-micro non-line-of-sight path loss closed form.
pub fn umi_nlos_db(d_m: f64, f_ghz: f64) -> f64 {
    36.7 * d_m.log10() + 22.7 + 26.0 * f_ghz.log10()
}

/// Free-space path loss, the lower bound on any model output.
pub fn free_space_db(d_m: f64, f_ghz: f64) -> f64 {
    const C: f64 = 299_792_458.0;
    20.0 * (4.0 * std::f64::consts::PI * d_m * f_ghz * 1e9 / C).log10()
}

/// Total path loss in dB for one sector-to-cell link.
///
/// Distances below 1 m are clamped. `shadow_db` is the pre-drawn correlated
/// shadowing sample for this cell.
pub fn path_loss(dep: &Deployment, map: &GridMap, site_m: (f64, f64), cell: Cell, los: bool, shadow_db: f64) -> f64 {
    let (cx, cy) = dep.cell_center_m(map, cell);
    let d2d = (cx - site_m.0).hypot(cy - site_m.1);
    let dh = dep.site_height_m - dep.agent_height_m;
    let d3d = d2d.hypot(dh).max(1.0);
    let f = dep.carrier_ghz;
    let model = if los {
        umi_los_db(d3d, f)
    } else {
        umi_nlos_db(d3d, f)
    };
    model.max(free_space_db(d3d, f)) + shadow_db
}

/// Zero-mean Gaussian shadowing with exponential spatial autocorrelation
/// (separable AR(1) in x and y), deterministic per seed.
pub fn shadowing_field(map: &GridMap, sigma_db: f64, decorr_m: f64, seed: u64, stream: u64) -> Vec<f64> {
    let (w, h) = (map.width(), map.height());
    let mut field = vec![0.0f64; w * h];
    if sigma_db == 0.0 {
        return field;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    for v in field.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    let a = (-map.cell_size_m() / decorr_m).exp();
    let b = (1.0 - a * a).sqrt();
    for y in 0..h {
        for x in 1..w {
            field[y * w + x] = a * field[y * w + x - 1] + b * field[y * w + x];
        }
    }
    for x in 0..w {
        for y in 1..h {
            field[y * w + x] = a * field[(y - 1) * w + x] + b * field[y * w + x];
        }
    }
    for v in field.iter_mut() {
        *v *= sigma_db;
    }
    field
}

/// True iff the supercover ray between the two cell centers touches no
/// impassable cell (the origin cell itself is ignored).
pub fn line_of_sight(map: &GridMap, from: Cell, to: Cell) -> bool {
    for (x, y) in supercover_cells(from, to) {
        if (x, y) != from && map.is_blocked(x, y) {
            return false;
        }
    }
    true
}

/// Every grid cell touched by the segment between two cell centers,
/// including both cells adjacent to an exactly-grazed corner.
pub fn supercover_cells(from: Cell, to: Cell) -> Vec<Cell> {
    let mut out = vec![from];
    let (mut x, mut y) = from;
    let dx = to.0 - from.0;
    let dy = to.1 - from.1;
    let sx = dx.signum();
    let sy = dy.signum();
    let nx = dx.abs();
    let ny = dy.abs();
    let (mut ix, mut iy) = (0i32, 0i32);
    while ix < nx || iy < ny {
        // compare (0.5 + ix) / nx with (0.5 + iy) / ny without division
        let t = (1 + 2 * ix) as i64 * ny as i64 - (1 + 2 * iy) as i64 * nx as i64;
        if ny == 0 || (nx != 0 && t < 0) {
            x += sx;
            ix += 1;
        } else if nx == 0 || t > 0 {
            y += sy;
            iy += 1;
        } else {
            // exact corner: both side cells are touched
            out.push((x + sx, y));
            out.push((x, y + sy));
            x += sx;
            y += sy;
            ix += 1;
            iy += 1;
        }
        out.push((x, y));
    }
    out
}

/// The committed CQI-style MCS table: `(SINR threshold dB, bits/s/Hz)`.
/// The first threshold is exactly the blackout threshold.
pub const MCS_TABLE: [(f64, f64); 15] = [
    (BLACKOUT_THRESHOLD_DB, 0.1523),
    (-6.5, 0.2344),
    (-4.5, 0.3770),
    (-2.5, 0.6016),
    (-0.5, 0.8770),
    (1.5, 1.1758),
    (3.5, 1.4766),
    (5.5, 1.9141),
    (7.5, 2.4063),
    (9.5, 2.7305),
    (11.5, 3.3223),
    (13.5, 3.9023),
    (15.5, 4.5234),
    (17.5, 5.1152),
    (19.5, 5.5547),
];

/// Piecewise-constant nondecreasing SINR-to-rate mapping; 0 below blackout.
pub fn mcs_rate(sinr_db: f64, bandwidth_hz: f64) -> f64 {
    let mut eff = 0.0;
    for &(thr, e) in MCS_TABLE.iter() {
        if sinr_db >= thr {
            eff = e;
        } else {
            break;
        }
    }
    eff * bandwidth_hz
}

/// Strictly below the blackout threshold: no data can be transmitted.
pub fn is_blackout(sinr_db: f64) -> bool {
    sinr_db < BLACKOUT_THRESHOLD_DB
}

/// Clamp SINR in dB onto the `[0, 1]` window anchored at the blackout
/// threshold, so blackout maps to exactly 0.
pub fn normalize_sinr(sinr_db: f64) -> f64 {
    ((sinr_db - BLACKOUT_THRESHOLD_DB) / (SINR_NORM_MAX_DB - BLACKOUT_THRESHOLD_DB)).clamp(0.0, 1.0)
}

/// Per-cell radio state, immutable once built.
#[derive(Debug, Clone)]
pub struct RadioMap {
    width: usize,
    height: usize,
    n_sectors: usize,
    /// `cell * n_sectors + sector`, impassable cells hold NaN.
    rx_power_dbm: Vec<f64>,
    serving: Vec<u16>,
    sinr_db: Vec<f64>,
    sinr_norm: Vec<f64>,
    rate_bps: Vec<f64>,
    passable: Vec<bool>,
    pub noise_floor_dbm: f64,
    pub blackout_threshold_db: f64,
}

impl RadioMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_sectors(&self) -> usize {
        self.n_sectors
    }

    fn idx(&self, cell: Cell) -> Option<usize> {
        if cell.0 < 0 || cell.1 < 0 {
            return None;
        }
        let (x, y) = (cell.0 as usize, cell.1 as usize);
        if x >= self.width || y >= self.height {
            return None;
        }
        Some(y * self.width + x)
    }

    pub fn sinr_db_at(&self, cell: Cell) -> f64 {
        self.idx(cell).map_or(f64::NEG_INFINITY, |i| self.sinr_db[i])
    }

    /// Normalized SINR; 0 outside the map and on impassable cells.
    pub fn sinr_norm_at(&self, cell: Cell) -> f64 {
        match self.idx(cell) {
            Some(i) if self.passable[i] => self.sinr_norm[i],
            _ => 0.0,
        }
    }

    pub fn rate_bps_at(&self, cell: Cell) -> f64 {
        self.idx(cell).map_or(0.0, |i| self.rate_bps[i])
    }

    pub fn serving_sector_at(&self, cell: Cell) -> usize {
        self.idx(cell).map_or(0, |i| self.serving[i] as usize)
    }

    pub fn rx_power_dbm_at(&self, cell: Cell, sector: usize) -> f64 {
        self.idx(cell)
            .map_or(f64::NAN, |i| self.rx_power_dbm[i * self.n_sectors + sector])
    }

    pub fn is_blackout_at(&self, cell: Cell) -> bool {
        is_blackout(self.sinr_db_at(cell))
    }

    pub fn is_passable(&self, cell: Cell) -> bool {
        self.idx(cell).is_some_and(|i| self.passable[i])
    }

    /// Flat map with one synthetic sector and the same SINR everywhere;
    /// used by tests and synthetic benchmarks.
    pub fn uniform(map: &GridMap, sinr_db: f64) -> RadioMap {
        let grid = vec![sinr_db; map.width() * map.height()];
        Self::from_sinr_grid(map, &grid, Deployment::default().noise_floor_dbm())
    }

    /// Build directly from a per-cell SINR grid (row-major, dB).
    pub fn from_sinr_grid(map: &GridMap, sinr_db_grid: &[f64], noise_floor_dbm: f64) -> RadioMap {
        assert_eq!(sinr_db_grid.len(), map.width() * map.height());
        let n = sinr_db_grid.len();
        let passable: Vec<bool> = (0..n)
            .map(|i| map.raw_cells()[i] == 0)
            .collect();
        let bw = Deployment::default().bandwidth_hz;
        RadioMap {
            width: map.width(),
            height: map.height(),
            n_sectors: 1,
            rx_power_dbm: sinr_db_grid.iter().map(|s| s + noise_floor_dbm).collect(),
            serving: vec![0; n],
            sinr_db: sinr_db_grid.to_vec(),
            sinr_norm: sinr_db_grid.iter().map(|&s| normalize_sinr(s)).collect(),
            rate_bps: sinr_db_grid.iter().map(|&s| mcs_rate(s, bw)).collect(),
            passable,
            noise_floor_dbm,
            blackout_threshold_db: BLACKOUT_THRESHOLD_DB,
        }
    }

    /// CSV rows `(x, y, sinr_db, sinr_norm, serving_sector, blackout)` for
    /// every passable cell.
    pub fn csv_rows(&self) -> Vec<(i32, i32, f64, f64, usize, bool)> {
        let mut rows = Vec::new();
        for y in 0..self.height as i32 {
            for x in 0..self.width as i32 {
                let i = y as usize * self.width + x as usize;
                if self.passable[i] {
                    rows.push((
                        x,
                        y,
                        self.sinr_db[i],
                        self.sinr_norm[i],
                        self.serving[i] as usize,
                        is_blackout(self.sinr_db[i]),
                    ));
                }
            }
        }
        rows
    }
}

/// Compute the full radio map for one grid and deployment.
///
/// Per passable cell: received power from every sector (antenna pattern,
/// UMi path loss with the LoS/NLoS split from grid ray-casting, correlated
/// shadowing), the serving sector by maximum power, SINR against all
/// non-serving sectors plus thermal noise, the normalized SINR and the MCS
/// rate. Deterministic per `(map, deployment, seed)`.
pub fn build_radio_map(map: &GridMap, dep: &Deployment, seed: u64) -> RadioMap {
    use rayon::prelude::*;
    let sites = dep.resolve_sites(map);
    let sectors: Vec<(usize, f64)> = sites
        .iter()
        .enumerate()
        .flat_map(|(si, _)| dep.sector_azimuths_deg.iter().map(move |&az| (si, az)))
        .collect();
    let n_sectors = sectors.len().max(1);
    let noise_floor_dbm = dep.noise_floor_dbm();
    let noise_lin = 10f64.powf(noise_floor_dbm / 10.0);

    // one shadowing field per (site, los-class); sectors at a site share it
    let shadow: Vec<[Vec<f64>; 2]> = sites
        .iter()
        .enumerate()
        .map(|(si, _)| {
            [
                shadowing_field(map, dep.shadow_sigma_los_db, dep.decorr_los_m, seed, 2 * si as u64),
                shadowing_field(map, dep.shadow_sigma_nlos_db, dep.decorr_nlos_m, seed, 2 * si as u64 + 1),
            ]
        })
        .collect();

    let site_cells: Vec<Cell> = sites
        .iter()
        .map(|&(sx, sy)| {
            let cs = map.cell_size_m();
            (
                ((sx / cs) as i32).clamp(0, map.width() as i32 - 1),
                ((sy / cs) as i32).clamp(0, map.height() as i32 - 1),
            )
        })
        .collect();

    let n = map.width() * map.height();
    let cells: Vec<usize> = (0..n).collect();
    let per_cell: Vec<(Vec<f64>, u16, f64)> = cells
        .par_iter()
        .map(|&i| {
            let cell = ((i % map.width()) as i32, (i / map.width()) as i32);
            if !map.is_passable(cell.0, cell.1) {
                return (vec![f64::NAN; n_sectors], 0, f64::NEG_INFINITY);
            }
            let mut rx = Vec::with_capacity(n_sectors);
            for &(si, az) in &sectors {
                let los = line_of_sight(map, site_cells[si], cell);
                let sh = shadow[si][usize::from(!los)][i];
                let gain = antenna_gain(dep, map, sites[si], az, cell);
                let pl = path_loss(dep, map, sites[si], cell, los, sh);
                rx.push(dep.tx_power_dbm + gain - pl);
            }
            let serving = rx
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite powers"))
                .map(|(s, _)| s)
                .unwrap_or(0);
            let signal_lin = 10f64.powf(rx[serving] / 10.0);
            let interf_lin: f64 = rx
                .iter()
                .enumerate()
                .filter(|&(s, _)| s != serving)
                .map(|(_, &p)| 10f64.powf(p / 10.0))
                .sum();
            let sinr_db = 10.0 * (signal_lin / (interf_lin + noise_lin)).log10();
            (rx, serving as u16, sinr_db)
        })
        .collect();

    let mut rx_power_dbm = Vec::with_capacity(n * n_sectors);
    let mut serving = Vec::with_capacity(n);
    let mut sinr_db = Vec::with_capacity(n);
    for (rx, s, g) in per_cell {
        rx_power_dbm.extend(rx);
        serving.push(s);
        sinr_db.push(g);
    }
    let sinr_norm: Vec<f64> = sinr_db.iter().map(|&g| normalize_sinr(g)).collect();
    let rate_bps: Vec<f64> = sinr_db
        .iter()
        .map(|&g| if g.is_finite() { mcs_rate(g, dep.bandwidth_hz) } else { 0.0 })
        .collect();
    let passable: Vec<bool> = (0..n).map(|i| map.raw_cells()[i] == 0).collect();

    RadioMap {
        width: map.width(),
        height: map.height(),
        n_sectors,
        rx_power_dbm,
        serving,
        sinr_db,
        sinr_norm,
        rate_bps,
        passable,
        noise_floor_dbm,
        blackout_threshold_db: BLACKOUT_THRESHOLD_DB,
    }
}
