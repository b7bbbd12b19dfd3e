use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Event, EventError, LabeledEvent, Polarity, SensorGeometry, TruthSample};

pub const BINARY_MAGIC: &[u8; 4] = b"AEVT";
pub const BINARY_VERSION: u16 = 1;
const BINARY_HEADER_LEN: u64 = 10;
const BINARY_RECORD_LEN: u64 = 17;

const TRUTH_HEADER: &str = "t_us,label,px,py,vx,vy,theta,q,l1,l2,dx,dy";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Binary,
}

impl EventFormat {
    /// Guesses the format from the file extension, falling back to sniffing
    /// the binary magic.
    pub fn detect(path: &Path) -> Result<Self, EventError> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") | Some("txt") => return Ok(EventFormat::Csv),
            Some("aevt") | Some("bin") => return Ok(EventFormat::Binary),
            _ => {}
        }
        let mut magic = [0u8; 4];
        let mut file = File::open(path)?;
        match file.read_exact(&mut magic) {
            Ok(()) if &magic == BINARY_MAGIC => Ok(EventFormat::Binary),
            _ => Ok(EventFormat::Csv),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    /// Largest tolerated backwards step in time. Events inside the tolerance
    /// are clamped to the running maximum so the yielded stream is monotone.
    pub tolerance_us: u64,
}

enum Source<R> {
    Csv { reader: R, line: usize, buf: String },
    Binary { reader: R, index: usize },
}

/// Streaming reader over either event format. The geometry header is parsed
/// on construction; records are validated as they are pulled.
pub struct EventReader<R> {
    source: Source<R>,
    geometry: SensorGeometry,
    labelled: bool,
    options: ReadOptions,
    last_t: Option<u64>,
    count: usize,
    done: bool,
}

impl<R: BufRead> EventReader<R> {
    pub fn new(mut reader: R, format: EventFormat, options: ReadOptions) -> Result<Self, EventError> {
        let (source, geometry, labelled) = match format {
            EventFormat::Csv => {
                let mut buf = String::new();
                let mut line = 0usize;
                let geometry = loop {
                    buf.clear();
                    if reader.read_line(&mut buf)? == 0 {
                        return Err(EventError::MissingHeader);
                    }
                    line += 1;
                    let trimmed = buf.trim();
                    if trimmed.is_empty() {
                        continue;
                    }
                    break parse_geometry_header(trimmed).ok_or(EventError::MissingHeader)?;
                };
                (
                    Source::Csv {
                        reader,
                        line,
                        buf,
                    },
                    geometry,
                    false,
                )
            }
            EventFormat::Binary => {
                let mut magic = [0u8; 4];
                reader.read_exact(&mut magic).map_err(|_| EventError::BadMagic)?;
                if &magic != BINARY_MAGIC {
                    return Err(EventError::BadMagic);
                }
                let version = reader.read_u16::<LittleEndian>()?;
                if version != BINARY_VERSION {
                    return Err(EventError::UnsupportedVersion(version));
                }
                let width = reader.read_u16::<LittleEndian>()?;
                let height = reader.read_u16::<LittleEndian>()?;
                (
                    Source::Binary { reader, index: 0 },
                    SensorGeometry::new(width, height),
                    true,
                )
            }
        };
        Ok(Self {
            source,
            geometry,
            labelled,
            options,
            last_t: None,
            count: 0,
            done: false,
        })
    }

    pub fn geometry(&self) -> SensorGeometry {
        self.geometry
    }

    /// Whether a label column was present. Known for CSV only after the
    /// first record.
    pub fn is_labelled(&self) -> bool {
        self.labelled
    }

    fn next_record(&mut self) -> Result<Option<(LabeledEvent, usize)>, EventError> {
        match &mut self.source {
            Source::Csv { reader, line, buf } => loop {
                buf.clear();
                if reader.read_line(buf)? == 0 {
                    return Ok(None);
                }
                *line += 1;
                let trimmed = buf.trim();
                if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with("t_us") {
                    continue;
                }
                let (record, labelled) = parse_csv_record(trimmed, *line)?;
                if labelled {
                    self.labelled = true;
                }
                return Ok(Some((record, *line)));
            },
            Source::Binary { reader, index } => {
                let mut raw = [0u8; BINARY_RECORD_LEN as usize];
                let mut filled = 0;
                while filled < raw.len() {
                    let n = reader.read(&mut raw[filled..])?;
                    if n == 0 {
                        break;
                    }
                    filled += n;
                }
                if filled == 0 {
                    return Ok(None);
                }
                let offset = BINARY_HEADER_LEN + *index as u64 * BINARY_RECORD_LEN;
                if filled < raw.len() {
                    return Err(EventError::Truncated {
                        index: *index,
                        offset: offset + filled as u64,
                    });
                }
                let mut cur = &raw[..];
                let t = cur.read_u64::<LittleEndian>()?;
                let x = cur.read_u16::<LittleEndian>()?;
                let y = cur.read_u16::<LittleEndian>()?;
                let p = cur.read_i8()?;
                let label = cur.read_u32::<LittleEndian>()?;
                let polarity = Polarity::from_sign(p as i64).ok_or(EventError::InvalidPolarity {
                    line: *index + 1,
                    value: p.to_string(),
                })?;
                *index += 1;
                Ok(Some((
                    LabeledEvent::new(Event::new(t, x, y, polarity), label),
                    *index,
                )))
            }
        }
    }
}

impl<R: BufRead> Iterator for EventReader<R> {
    type Item = Result<LabeledEvent, EventError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let step = self.next_record().and_then(|rec| {
            let Some((mut ev, position)) = rec else {
                return Ok(None);
            };
            if !self
                .geometry
                .contains(ev.event.x as i64, ev.event.y as i64)
            {
                return Err(EventError::OutOfBounds {
                    position,
                    x: ev.event.x as i64,
                    y: ev.event.y as i64,
                    width: self.geometry.width,
                    height: self.geometry.height,
                });
            }
            if let Some(prev) = self.last_t {
                if ev.event.t < prev {
                    if prev - ev.event.t > self.options.tolerance_us {
                        return Err(EventError::NonMonotonic {
                            position,
                            previous: prev,
                            current: ev.event.t,
                        });
                    }
                    ev.event.t = prev;
                }
            }
            self.last_t = Some(ev.event.t);
            self.count += 1;
            Ok(Some(ev))
        });
        match step {
            Ok(Some(ev)) => Some(Ok(ev)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

fn parse_geometry_header(line: &str) -> Option<SensorGeometry> {
    let body = line.strip_prefix('#')?;
    let mut width = None;
    let mut height = None;
    for tok in body.split_whitespace() {
        if let Some(v) = tok.strip_prefix("width=") {
            width = v.parse().ok();
        } else if let Some(v) = tok.strip_prefix("height=") {
            height = v.parse().ok();
        }
    }
    Some(SensorGeometry::new(width?, height?))
}

fn parse_csv_record(line: &str, line_no: usize) -> Result<(LabeledEvent, bool), EventError> {
    let malformed = |message: String| EventError::Malformed {
        line: line_no,
        message,
    };
    let mut fields = line.split(',').map(str::trim);
    let mut field = |name: &str| {
        fields
            .next()
            .ok_or_else(|| malformed(format!("missing field `{name}`")))
    };
    let t_raw = field("t_us")?;
    let x_raw = field("x")?;
    let y_raw = field("y")?;
    let p_raw = field("p")?;
    let label_raw = fields.next();
    if fields.next().is_some() {
        return Err(malformed("too many fields".into()));
    }
    let t: u64 = t_raw
        .parse()
        .map_err(|_| malformed(format!("invalid timestamp `{t_raw}`")))?;
    let x: u16 = x_raw
        .parse()
        .map_err(|_| malformed(format!("invalid x `{x_raw}`")))?;
    let y: u16 = y_raw
        .parse()
        .map_err(|_| malformed(format!("invalid y `{y_raw}`")))?;
    let polarity = p_raw
        .parse::<i64>()
        .ok()
        .and_then(Polarity::from_sign)
        .ok_or_else(|| EventError::InvalidPolarity {
            line: line_no,
            value: p_raw.to_string(),
        })?;
    let label = match label_raw {
        Some(raw) => raw
            .parse()
            .map_err(|_| malformed(format!("invalid label `{raw}`")))?,
        None => 0,
    };
    Ok((
        LabeledEvent::new(Event::new(t, x, y, polarity), label),
        label_raw.is_some(),
    ))
}

/// A fully materialized stream.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub geometry: SensorGeometry,
    pub events: Vec<LabeledEvent>,
    pub labelled: bool,
}

pub fn open_events(
    path: &Path,
    format: Option<EventFormat>,
    options: ReadOptions,
) -> Result<EventReader<BufReader<File>>, EventError> {
    let format = match format {
        Some(f) => f,
        None => EventFormat::detect(path)?,
    };
    let file = File::open(path)?;
    EventReader::new(BufReader::with_capacity(1 << 16, file), format, options)
}

pub fn read_events(
    path: &Path,
    format: Option<EventFormat>,
    options: ReadOptions,
) -> Result<EventStream, EventError> {
    let mut reader = open_events(path, format, options)?;
    let events = reader.by_ref().collect::<Result<Vec<_>, _>>()?;
    Ok(EventStream {
        geometry: reader.geometry(),
        labelled: reader.is_labelled(),
        events,
    })
}

pub fn write_events_csv<W: Write>(
    mut w: W,
    geometry: SensorGeometry,
    events: &[LabeledEvent],
    labelled: bool,
) -> std::io::Result<()> {
    writeln!(w, "# width={} height={}", geometry.width, geometry.height)?;
    if labelled {
        writeln!(w, "t_us,x,y,p,label")?;
        for e in events {
            let ev = &e.event;
            writeln!(w, "{},{},{},{},{}", ev.t, ev.x, ev.y, ev.polarity.sign(), e.label)?;
        }
    } else {
        writeln!(w, "t_us,x,y,p")?;
        for e in events {
            let ev = &e.event;
            writeln!(w, "{},{},{},{}", ev.t, ev.x, ev.y, ev.polarity.sign())?;
        }
    }
    w.flush()
}

pub fn write_events_binary<W: Write>(
    mut w: W,
    geometry: SensorGeometry,
    events: &[LabeledEvent],
) -> std::io::Result<()> {
    w.write_all(BINARY_MAGIC)?;
    w.write_u16::<LittleEndian>(BINARY_VERSION)?;
    w.write_u16::<LittleEndian>(geometry.width)?;
    w.write_u16::<LittleEndian>(geometry.height)?;
    for e in events {
        w.write_u64::<LittleEndian>(e.event.t)?;
        w.write_u16::<LittleEndian>(e.event.x)?;
        w.write_u16::<LittleEndian>(e.event.y)?;
        w.write_i8(e.event.polarity.sign())?;
        w.write_u32::<LittleEndian>(e.label)?;
    }
    w.flush()
}

pub fn write_events(
    path: &Path,
    format: EventFormat,
    geometry: SensorGeometry,
    events: &[LabeledEvent],
    labelled: bool,
) -> Result<(), EventError> {
    let w = BufWriter::with_capacity(1 << 16, File::create(path)?);
    match format {
        EventFormat::Csv => write_events_csv(w, geometry, events, labelled)?,
        EventFormat::Binary => write_events_binary(w, geometry, events)?,
    }
    Ok(())
}

pub fn write_truth_csv<W: Write>(mut w: W, rows: &[TruthSample]) -> std::io::Result<()> {
    writeln!(w, "{TRUTH_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t_us,
            r.label,
            r.position[0],
            r.position[1],
            r.velocity[0],
            r.velocity[1],
            r.theta,
            r.q,
            r.lambda[0],
            r.lambda[1],
            r.delta[0],
            r.delta[1]
        )?;
    }
    w.flush()
}

pub fn read_truth_csv<R: BufRead>(r: R) -> Result<Vec<TruthSample>, EventError> {
    let mut rows = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("t_us") || trimmed.starts_with('#') {
            continue;
        }
        let bad = |message: String| EventError::Malformed {
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 12 {
            return Err(bad(format!("expected 12 fields, found {}", fields.len())));
        }
        let f = |k: usize| -> Result<f64, EventError> {
            fields[k]
                .parse()
                .map_err(|_| bad(format!("invalid number `{}`", fields[k])))
        };
        rows.push(TruthSample {
            t_us: fields[0]
                .parse()
                .map_err(|_| bad(format!("invalid timestamp `{}`", fields[0])))?,
            label: fields[1]
                .parse()
                .map_err(|_| bad(format!("invalid label `{}`", fields[1])))?,
            position: [f(2)?, f(3)?],
            velocity: [f(4)?, f(5)?],
            theta: f(6)?,
            q: f(7)?,
            lambda: [f(8)?, f(9)?],
            delta: [f(10)?, f(11)?],
        });
    }
    Ok(rows)
}
