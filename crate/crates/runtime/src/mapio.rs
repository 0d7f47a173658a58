//! Occupancy maps on disk: a binary PGM image (255 free, 0 occupied, 205
//! unknown, top row first) plus a YAML sidecar in the usual map-server layout.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dronenav_core::geom::Pose2D;
use dronenav_core::mapping::{GridGeometry, Occupancy, OccupancyGrid};
use serde::{Deserialize, Serialize};

pub const FREE_PIXEL: u8 = 255;
pub const OCCUPIED_PIXEL: u8 = 0;
pub const UNKNOWN_PIXEL: u8 = 205;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMetadata {
    pub image: String,
    pub resolution: f64,
    pub origin: [f64; 3],
    pub occupied_thresh: f64,
    pub free_thresh: f64,
    pub negate: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum MapError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {location}: {message}")]
    Format {
        path: PathBuf,
        location: String,
        message: String,
    },
    #[error("cannot save an empty grid")]
    Empty,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MapError + '_ {
    move |source| MapError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `foo`, `foo.yaml` and `foo.pgm` all name the map whose sidecar is
/// `foo.yaml`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("yaml") | Some("yml") => path.to_path_buf(),
        Some("pgm") => path.with_extension("yaml"),
        _ => {
            let mut s = path.as_os_str().to_owned();
            s.push(".yaml");
            PathBuf::from(s)
        }
    }
}

pub fn encode_pgm(grid: &OccupancyGrid) -> Vec<u8> {
    let g = &grid.geometry;
    let mut out = format!("P5\n{} {}\n255\n", g.width, g.height).into_bytes();
    for row in (0..g.height).rev() {
        out.extend(grid.cells[row * g.width..(row + 1) * g.width].iter().map(|c| match c {
            Occupancy::Free => FREE_PIXEL,
            Occupancy::Occupied => OCCUPIED_PIXEL,
            Occupancy::Unknown => UNKNOWN_PIXEL,
        }));
    }
    out
}

pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major, top row first.
    pub pixels: Vec<u8>,
}

/// Decodes binary (P5) or ASCII (P2) 8-bit graymaps. Errors carry the byte
/// offset where parsing stopped.
pub fn decode_pgm(bytes: &[u8]) -> Result<Pgm, (usize, String)> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<(usize, String), (usize, String)> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
            *pos += 1;
        }
        if start == *pos {
            return Err((start, "unexpected end of header".into()));
        }
        Ok((start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
    };
    let (_, magic) = token(&mut pos)?;
    if magic != "P5" && magic != "P2" {
        return Err((0, format!("expected magic P5 or P2, found {magic:?}")));
    }
    let number = |pos: &mut usize, what: &str| -> Result<usize, (usize, String)> {
        let (at, t) = token(pos)?;
        t.parse::<usize>()
            .map_err(|_| (at, format!("{what} must be a positive integer, found {t:?}")))
    };
    let width = number(&mut pos, "width")?;
    let height = number(&mut pos, "height")?;
    let maxval = number(&mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err((pos, "image must not be empty".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err((pos, format!("only 8-bit images are supported (maxval {maxval})")));
    }
    let n = width * height;
    let pixels = if magic == "P5" {
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let data = bytes.get(pos..).unwrap_or(&[]);
        if data.len() < n {
            return Err((bytes.len(), format!("raster truncated: {} of {n} bytes", data.len())));
        }
        if data.len() > n {
            return Err((pos + n, format!("{} trailing bytes after raster", data.len() - n)));
        }
        data.to_vec()
    } else {
        let mut px = Vec::with_capacity(n);
        for _ in 0..n {
            let v = number(&mut pos, "pixel")?;
            if v > maxval {
                return Err((pos, format!("pixel {v} exceeds maxval {maxval}")));
            }
            px.push(v as u8);
        }
        px
    };
    if let Some(&v) = pixels.iter().find(|v| **v as usize > maxval) {
        return Err((pos, format!("pixel {v} exceeds maxval {maxval}")));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}

pub fn classify(pixel: u8, maxval: u16, meta: &MapMetadata) -> Occupancy {
    let v = pixel as f64 / maxval as f64;
    let p = if meta.negate == 0 { 1.0 - v } else { v };
    if p > meta.occupied_thresh {
        Occupancy::Occupied
    } else if p < meta.free_thresh {
        Occupancy::Free
    } else {
        Occupancy::Unknown
    }
}

/// Writes `<stem>.pgm` and `<stem>.yaml`; returns the sidecar path.
pub fn save_map(grid: &OccupancyGrid, stem: &Path) -> Result<PathBuf, MapError> {
    if grid.geometry.is_empty() {
        return Err(MapError::Empty);
    }
    let yaml_path = sidecar_path(stem);
    let pgm_path = yaml_path.with_extension("pgm");
    let o = &grid.geometry.origin;
    let meta = MapMetadata {
        image: pgm_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        resolution: grid.geometry.resolution,
        origin: [o.x, o.y, o.theta],
        occupied_thresh: 0.65,
        free_thresh: 0.196,
        negate: 0,
        mode: None,
    };
    if let Some(dir) = yaml_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(&pgm_path, encode_pgm(grid)).map_err(io_err(&pgm_path))?;
    let text = serde_yaml::to_string(&meta).expect("metadata serializes");
    std::fs::write(&yaml_path, text).map_err(io_err(&yaml_path))?;
    Ok(yaml_path)
}

pub fn load_map(path: &Path) -> Result<OccupancyGrid, MapError> {
    let yaml_path = sidecar_path(path);
    let text = std::fs::read_to_string(&yaml_path).map_err(io_err(&yaml_path))?;
    let meta: MapMetadata = serde_yaml::from_str(&text).map_err(|e| MapError::Format {
        path: yaml_path.clone(),
        location: e
            .location()
            .map_or("document".into(), |l| format!("line {} column {}", l.line(), l.column())),
        message: e.to_string(),
    })?;
    if !(meta.resolution > 0.0 && meta.resolution.is_finite()) {
        return Err(MapError::Format {
            path: yaml_path,
            location: "key resolution".into(),
            message: "must be positive".into(),
        });
    }
    let image = yaml_path
        .parent()
        .map_or_else(|| PathBuf::from(&meta.image), |d| d.join(&meta.image));
    let bytes = std::fs::read(&image).map_err(io_err(&image))?;
    let pgm = decode_pgm(&bytes).map_err(|(at, message)| MapError::Format {
        path: image.clone(),
        location: format!("byte {at}"),
        message,
    })?;
    let geometry = GridGeometry::new(
        meta.resolution,
        pgm.width,
        pgm.height,
        Pose2D::new(meta.origin[0], meta.origin[1], meta.origin[2]),
    );
    let mut cells = Vec::with_capacity(geometry.len());
    for row in (0..pgm.height).rev() {
        cells.extend(
            pgm.pixels[row * pgm.width..(row + 1) * pgm.width]
                .iter()
                .map(|p| classify(*p, pgm.maxval, &meta)),
        );
    }
    Ok(OccupancyGrid { geometry, cells })
}

pub fn describe(grid: &OccupancyGrid) -> String {
    let g = &grid.geometry;
    let mut s = String::new();
    let _ = writeln!(s, "size       {} x {} cells", g.width, g.height);
    let _ = writeln!(s, "resolution {} m", g.resolution);
    let _ = writeln!(
        s,
        "origin     [{}, {}, {}]",
        g.origin.x, g.origin.y, g.origin.theta
    );
    let _ = writeln!(
        s,
        "extent     {:.3} m x {:.3} m",
        g.width as f64 * g.resolution,
        g.height as f64 * g.resolution
    );
    let _ = writeln!(s, "free       {}", grid.count(Occupancy::Free));
    let _ = writeln!(s, "occupied   {}", grid.count(Occupancy::Occupied));
    let _ = writeln!(s, "unknown    {}", grid.count(Occupancy::Unknown));
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapDiff {
    pub same_geometry: bool,
    pub changed: usize,
    /// Cells present in only one of the grids (geometry mismatch).
    pub unmatched: usize,
    pub occupied_iou: f64,
}

/// Cell-by-cell comparison over map-frame cell centers of `a`.
pub fn diff_maps(a: &OccupancyGrid, b: &OccupancyGrid) -> MapDiff {
    let same_geometry = a.geometry == b.geometry;
    let (mut changed, mut unmatched, mut inter, mut union) = (0, 0, 0usize, 0usize);
    for (idx, ca) in a.cells.iter().enumerate() {
        let cell = a.geometry.cell_from_index(idx);
        let cb = if same_geometry {
            Some(b.cells[idx])
        } else {
            b.get(b.geometry.cell_of(a.geometry.cell_center(cell)))
        };
        let Some(cb) = cb else {
            unmatched += 1;
            continue;
        };
        changed += (*ca != cb) as usize;
        let (oa, ob) = (*ca == Occupancy::Occupied, cb == Occupancy::Occupied);
        inter += (oa && ob) as usize;
        union += (oa || ob) as usize;
    }
    MapDiff {
        same_geometry,
        changed,
        unmatched,
        occupied_iou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
    }
}
