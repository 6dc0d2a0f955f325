//! EDF (European Data Format) codec: a 256-byte fixed header, 256 header bytes
//! per signal and data records of 16-bit little-endian integers.

use super::{Channel, PsgError, Recording, Result};

/// Digital range used when writing. Symmetric so that physical zero encodes
/// to digital zero under a symmetric physical range.
pub const DIGITAL_MIN: i32 = -32767;
pub const DIGITAL_MAX: i32 = 32767;

const FIXED_HEADER: usize = 256;
const SIGNAL_HEADER: usize = 256;

struct SignalHeader {
    label: String,
    unit: String,
    physical_min: f64,
    physical_max: f64,
    digital_min: i32,
    digital_max: i32,
    samples_per_record: usize,
}

fn put_field(out: &mut Vec<u8>, value: &str, width: usize, what: &str) -> Result<()> {
    if !value.is_ascii() {
        return Err(PsgError::MalformedHeader(format!("{what} `{value}` is not ASCII")));
    }
    if value.len() > width {
        return Err(PsgError::MalformedHeader(format!(
            "{what} `{value}` exceeds {width} characters"
        )));
    }
    out.extend_from_slice(value.as_bytes());
    out.extend(std::iter::repeat(b' ').take(width - value.len()));
    Ok(())
}

/// Shortest decimal rendering of `v` in at most 8 characters, rounded in the
/// requested direction so that a declared range never shrinks.
fn format_bound(v: f64, round_up: bool) -> Result<(String, f64)> {
    for decimals in (0..=6).rev() {
        let scale = 10f64.powi(decimals);
        let r = if round_up { (v * scale).ceil() / scale } else { (v * scale).floor() / scale };
        let s = format!("{:.*}", decimals as usize, r);
        let s = if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        };
        let s = if s == "-0" { "0".to_string() } else { s };
        if s.len() <= 8 {
            let parsed: f64 = s.parse().expect("formatted float parses");
            return Ok((s, parsed));
        }
    }
    Err(PsgError::MalformedHeader(format!("physical bound {v} does not fit 8 characters")))
}

fn format_number(v: f64) -> Result<String> {
    let (s, parsed) = format_bound(v, false)?;
    if parsed != v {
        return Err(PsgError::MalformedHeader(format!("value {v} not representable in 8 characters")));
    }
    Ok(s)
}

fn encode(value: f64, pmin: f64, pmax: f64) -> i16 {
    let span = (DIGITAL_MAX - DIGITAL_MIN) as f64;
    let d = if pmax == pmin {
        DIGITAL_MIN as f64
    } else {
        ((value - pmin) / (pmax - pmin) * span + DIGITAL_MIN as f64).round()
    };
    d.clamp(DIGITAL_MIN as f64, DIGITAL_MAX as f64) as i16
}

/// Serialise a recording to EDF bytes.
///
/// When every channel has an integral rate and the same whole number of
/// seconds, data records are one second long; otherwise the file holds a
/// single record spanning the recording.
pub fn write_edf(recording: &Recording) -> Result<Vec<u8>> {
    if recording.channels.is_empty() {
        return Err(PsgError::MalformedHeader("recording has no channels".into()));
    }
    for ch in &recording.channels {
        if !(ch.sampling_rate > 0.0) {
            return Err(PsgError::InvalidRate(format!("channel `{}` rate {}", ch.label, ch.sampling_rate)));
        }
    }

    let seconds = recording.channels[0].samples.len() as f64 / recording.channels[0].sampling_rate;
    let one_second_records = recording.channels.iter().all(|c| {
        c.sampling_rate.fract() == 0.0
            && seconds.fract() == 0.0
            && c.samples.len() == (c.sampling_rate * seconds) as usize
    });
    let (n_records, record_duration, per_record): (usize, String, Vec<usize>) = if one_second_records {
        (
            seconds as usize,
            "1".to_string(),
            recording.channels.iter().map(|c| c.sampling_rate as usize).collect(),
        )
    } else {
        (
            1,
            format_number(seconds)?,
            recording.channels.iter().map(|c| c.samples.len()).collect(),
        )
    };

    let mut bounds = Vec::with_capacity(recording.channels.len());
    for ch in &recording.channels {
        let (lo, hi) = ch.physical_range;
        let (lo_s, lo_v) = format_bound(lo, false)?;
        let (hi_s, hi_v) = format_bound(hi, true)?;
        for &v in &ch.samples {
            if v < lo || v > hi || !v.is_finite() {
                return Err(PsgError::RangeOverflow {
                    channel: ch.label.clone(),
                    value: v,
                    min: lo,
                    max: hi,
                });
            }
        }
        bounds.push((lo_s, lo_v, hi_s, hi_v));
    }

    let ns = recording.channels.len();
    let header_bytes = FIXED_HEADER + SIGNAL_HEADER * ns;
    let mut out = Vec::with_capacity(header_bytes + n_records * per_record.iter().sum::<usize>() * 2);
    put_field(&mut out, "0", 8, "version")?;
    put_field(&mut out, "X X X X", 80, "patient id")?;
    put_field(&mut out, &recording.id, 80, "recording id")?;
    put_field(&mut out, "01.01.00", 8, "start date")?;
    put_field(&mut out, "00.00.00", 8, "start time")?;
    put_field(&mut out, &header_bytes.to_string(), 8, "header bytes")?;
    put_field(&mut out, "", 44, "reserved")?;
    put_field(&mut out, &n_records.to_string(), 8, "record count")?;
    put_field(&mut out, &record_duration, 8, "record duration")?;
    put_field(&mut out, &ns.to_string(), 4, "signal count")?;

    for ch in &recording.channels {
        put_field(&mut out, &ch.label, 16, "label")?;
    }
    for _ in 0..ns {
        put_field(&mut out, "", 80, "transducer")?;
    }
    for ch in &recording.channels {
        put_field(&mut out, &ch.physical_unit, 8, "physical dimension")?;
    }
    for b in &bounds {
        put_field(&mut out, &b.0, 8, "physical minimum")?;
    }
    for b in &bounds {
        put_field(&mut out, &b.2, 8, "physical maximum")?;
    }
    for _ in 0..ns {
        put_field(&mut out, &DIGITAL_MIN.to_string(), 8, "digital minimum")?;
    }
    for _ in 0..ns {
        put_field(&mut out, &DIGITAL_MAX.to_string(), 8, "digital maximum")?;
    }
    for _ in 0..ns {
        put_field(&mut out, "", 80, "prefiltering")?;
    }
    for &n in &per_record {
        put_field(&mut out, &n.to_string(), 8, "samples per record")?;
    }
    for _ in 0..ns {
        put_field(&mut out, "", 32, "reserved")?;
    }
    debug_assert_eq!(out.len(), header_bytes);

    for r in 0..n_records {
        for (ci, ch) in recording.channels.iter().enumerate() {
            let n = per_record[ci];
            let (_, lo, _, hi) = bounds[ci];
            for &v in &ch.samples[r * n..(r + 1) * n] {
                out.extend_from_slice(&encode(v, lo, hi).to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn field(&mut self, width: usize, what: &str) -> Result<&'a str> {
        let end = self.pos + width;
        let raw = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| PsgError::MalformedHeader(format!("header ends inside {what}")))?;
        self.pos = end;
        std::str::from_utf8(raw)
            .map(str::trim)
            .map_err(|_| PsgError::MalformedHeader(format!("{what} is not ASCII")))
    }

    fn number<T: std::str::FromStr>(&mut self, width: usize, what: &str) -> Result<T> {
        let s = self.field(width, what)?;
        s.parse()
            .map_err(|_| PsgError::MalformedHeader(format!("{what} `{s}` is not a number")))
    }
}

/// Parse EDF bytes into a recording with samples in physical units.
pub fn parse_edf(bytes: &[u8]) -> Result<Recording> {
    if bytes.len() < FIXED_HEADER {
        return Err(PsgError::MalformedHeader(format!(
            "file is {} bytes, shorter than the fixed header",
            bytes.len()
        )));
    }
    let mut cur = Cursor { bytes, pos: 0 };
    let version = cur.field(8, "version")?;
    if version != "0" {
        return Err(PsgError::MalformedHeader(format!("unsupported version `{version}`")));
    }
    let patient = cur.field(80, "patient id")?.to_string();
    let recording_id = cur.field(80, "recording id")?.to_string();
    cur.field(8, "start date")?;
    cur.field(8, "start time")?;
    let header_bytes: usize = cur.number(8, "header bytes")?;
    cur.field(44, "reserved")?;
    let n_records: i64 = cur.number(8, "record count")?;
    let record_duration: f64 = cur.number(8, "record duration")?;
    let ns: usize = cur.number(4, "signal count")?;
    if ns == 0 {
        return Err(PsgError::MalformedHeader("signal count is zero".into()));
    }
    if header_bytes != FIXED_HEADER + SIGNAL_HEADER * ns {
        return Err(PsgError::MalformedHeader(format!(
            "header size {header_bytes} inconsistent with {ns} signals"
        )));
    }
    if !(record_duration > 0.0) {
        return Err(PsgError::MalformedHeader(format!("record duration {record_duration}")));
    }

    let mut signals: Vec<SignalHeader> = Vec::with_capacity(ns);
    for _ in 0..ns {
        signals.push(SignalHeader {
            label: cur.field(16, "label")?.to_string(),
            unit: String::new(),
            physical_min: 0.0,
            physical_max: 0.0,
            digital_min: 0,
            digital_max: 0,
            samples_per_record: 0,
        });
    }
    for _ in 0..ns {
        cur.field(80, "transducer")?;
    }
    for s in signals.iter_mut() {
        s.unit = cur.field(8, "physical dimension")?.to_string();
    }
    for s in signals.iter_mut() {
        s.physical_min = cur.number(8, "physical minimum")?;
    }
    for s in signals.iter_mut() {
        s.physical_max = cur.number(8, "physical maximum")?;
    }
    for s in signals.iter_mut() {
        s.digital_min = cur.number(8, "digital minimum")?;
    }
    for s in signals.iter_mut() {
        s.digital_max = cur.number(8, "digital maximum")?;
    }
    for _ in 0..ns {
        cur.field(80, "prefiltering")?;
    }
    for s in signals.iter_mut() {
        s.samples_per_record = cur.number(8, "samples per record")?;
    }
    for _ in 0..ns {
        cur.field(32, "reserved")?;
    }
    for s in &signals {
        if s.digital_min == s.digital_max {
            return Err(PsgError::CalibrationDegenerate(s.label.clone()));
        }
    }

    let record_bytes: usize = signals.iter().map(|s| s.samples_per_record * 2).sum();
    let data = &bytes[header_bytes..];
    let n_records = if n_records < 0 {
        if record_bytes == 0 {
            0
        } else {
            data.len() / record_bytes
        }
    } else {
        n_records as usize
    };
    let expected = n_records * record_bytes;
    if data.len() < expected {
        return Err(PsgError::TruncatedRecord {
            expected,
            actual: data.len(),
        });
    }

    let mut samples: Vec<Vec<f64>> = signals
        .iter()
        .map(|s| Vec::with_capacity(s.samples_per_record * n_records))
        .collect();
    let mut pos = 0;
    for _ in 0..n_records {
        for (si, s) in signals.iter().enumerate() {
            let gain = (s.physical_max - s.physical_min) / (s.digital_max - s.digital_min) as f64;
            for _ in 0..s.samples_per_record {
                let d = i16::from_le_bytes([data[pos], data[pos + 1]]) as f64;
                pos += 2;
                samples[si].push((d - s.digital_min as f64) * gain + s.physical_min);
            }
        }
    }

    let channels = signals
        .into_iter()
        .zip(samples)
        .map(|(s, samples)| Channel {
            sampling_rate: s.samples_per_record as f64 / record_duration,
            label: s.label,
            physical_unit: s.unit,
            physical_range: (s.physical_min, s.physical_max),
            samples,
        })
        .collect();
    let id = if recording_id.is_empty() { patient } else { recording_id };
    Recording::new(id, channels)
}
