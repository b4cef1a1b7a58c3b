//! Shared vocabulary: timestamps, weekdays, card and device identifiers,
//! access policies and the injectable clock.
//!
//! All calendar arithmetic is UTC with POSIX day arithmetic (no leap
//! seconds, no time zones).

use std::cell::Cell;
use std::collections::BTreeSet;
use std::fmt;
use std::ops::{Add, Sub};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const SECONDS_PER_DAY: i64 = 86_400;
pub const SECONDS_PER_WEEK: i64 = 7 * SECONDS_PER_DAY;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("malformed uid {0:?}: expected 8 hexadecimal characters")]
    MalformedUid(String),
    #[error("malformed device id {0:?}: expected <ROLE>_<number>")]
    MalformedDeviceId(String),
    #[error("malformed timestamp {0:?}: expected YYYY-MM-DDTHH:MM:SSZ")]
    MalformedTimestamp(String),
    #[error("malformed time of day {0:?}: expected HH:MM[:SS]")]
    MalformedTimeOfDay(String),
    #[error("unknown weekday {0:?}")]
    UnknownWeekday(String),
    #[error("millis out of range: {0}")]
    MillisOutOfRange(u16),
    #[error("seconds-of-day out of range: {0}")]
    SecondOfDayOutOfRange(u32),
    #[error("window start {start} is after window end {end}; encode overnight windows as two policies")]
    InvertedWindow { start: u32, end: u32 },
}

/// A UTC instant with millisecond resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp {
    seconds_utc: i64,
    millis: u16,
}

impl Timestamp {
    pub const UNIX_EPOCH: Timestamp = Timestamp {
        seconds_utc: 0,
        millis: 0,
    };

    pub fn new(seconds_utc: i64, millis: u16) -> Result<Self, DomainError> {
        if millis > 999 {
            return Err(DomainError::MillisOutOfRange(millis));
        }
        Ok(Self {
            seconds_utc,
            millis,
        })
    }

    pub const fn from_secs(seconds_utc: i64) -> Self {
        Self {
            seconds_utc,
            millis: 0,
        }
    }

    pub fn from_millis(total_millis: i64) -> Self {
        Self {
            seconds_utc: total_millis.div_euclid(1000),
            millis: total_millis.rem_euclid(1000) as u16,
        }
    }

    /// Builds a timestamp from a civil UTC date and time.
    pub fn from_civil(
        year: i64,
        month: u32,
        day: u32,
        hour: u32,
        minute: u32,
        second: u32,
    ) -> Self {
        let days = days_from_civil(year, month, day);
        Self::from_secs(
            days * SECONDS_PER_DAY + hour as i64 * 3600 + minute as i64 * 60 + second as i64,
        )
    }

    pub fn seconds_utc(&self) -> i64 {
        self.seconds_utc
    }

    pub fn millis(&self) -> u16 {
        self.millis
    }

    pub fn as_millis(&self) -> i64 {
        self.seconds_utc * 1000 + self.millis as i64
    }

    /// Drops the sub-second part.
    pub fn truncate_to_second(self) -> Self {
        Self::from_secs(self.seconds_utc)
    }

    pub fn days_since_epoch(&self) -> i64 {
        self.seconds_utc.div_euclid(SECONDS_PER_DAY)
    }

    /// Milliseconds from `earlier` to `self`, negative if `earlier` is later.
    pub fn millis_since(&self, earlier: Timestamp) -> i64 {
        self.as_millis() - earlier.as_millis()
    }

    /// Elapsed time since `earlier`, saturating at zero.
    pub fn saturating_duration_since(&self, earlier: Timestamp) -> Duration {
        Duration::from_millis(self.millis_since(earlier).max(0) as u64)
    }

    /// Formats as ISO-8601 with whole-second precision and a `Z` suffix.
    pub fn to_iso8601(&self) -> String {
        let (y, m, d) = civil_from_days(self.days_since_epoch());
        let sod = seconds_of_day(*self);
        format!(
            "{:04}-{:02}-{:02}T{:02}:{:02}:{:02}Z",
            y,
            m,
            d,
            sod / 3600,
            (sod / 60) % 60,
            sod % 60
        )
    }

    /// Parses exactly `YYYY-MM-DDTHH:MM:SSZ`.
    pub fn parse_iso8601(s: &str) -> Result<Self, DomainError> {
        let bad = || DomainError::MalformedTimestamp(s.to_string());
        let b = s.as_bytes();
        if b.len() != 20
            || b[4] != b'-'
            || b[7] != b'-'
            || b[10] != b'T'
            || b[13] != b':'
            || b[16] != b':'
            || b[19] != b'Z'
        {
            return Err(bad());
        }
        let num = |range: std::ops::Range<usize>| -> Result<u32, DomainError> {
            let part = &s[range];
            if !part.bytes().all(|c| c.is_ascii_digit()) {
                return Err(bad());
            }
            part.parse::<u32>().map_err(|_| bad())
        };
        let year = num(0..4)? as i64;
        let month = num(5..7)?;
        let day = num(8..10)?;
        let hour = num(11..13)?;
        let minute = num(14..16)?;
        let second = num(17..19)?;
        if !(1..=12).contains(&month)
            || day == 0
            || day > days_in_month(year, month)
            || hour > 23
            || minute > 59
            || second > 59
        {
            return Err(bad());
        }
        Ok(Self::from_civil(year, month, day, hour, minute, second))
    }
}

impl Add<Duration> for Timestamp {
    type Output = Timestamp;

    fn add(self, rhs: Duration) -> Timestamp {
        Timestamp::from_millis(self.as_millis() + rhs.as_millis() as i64)
    }
}

impl Sub<Duration> for Timestamp {
    type Output = Timestamp;

    fn sub(self, rhs: Duration) -> Timestamp {
        Timestamp::from_millis(self.as_millis() - rhs.as_millis() as i64)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_iso8601())
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_iso8601())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Timestamp::parse_iso8601(&s).map_err(serde::de::Error::custom)
    }
}

// Howard Hinnant's days_from_civil / civil_from_days.
fn days_from_civil(y: i64, m: u32, d: u32) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = y.div_euclid(400);
    let yoe = y - era * 400;
    let m = m as i64;
    let doy = (153 * (if m > 2 { m - 3 } else { m + 9 }) + 2) / 5 + d as i64 - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146_097 + doe - 719_468
}

fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    let y = yoe + era * 400 + if m <= 2 { 1 } else { 0 };
    (y, m, d)
}

fn days_in_month(year: i64, month: u32) -> u32 {
    match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        _ => {
            let leap = (year % 4 == 0 && year % 100 != 0) || year % 400 == 0;
            if leap {
                29
            } else {
                28
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Weekday {
    Monday,
    Tuesday,
    Wednesday,
    Thursday,
    Friday,
    Saturday,
    Sunday,
}

impl Weekday {
    pub const ALL: [Weekday; 7] = [
        Weekday::Monday,
        Weekday::Tuesday,
        Weekday::Wednesday,
        Weekday::Thursday,
        Weekday::Friday,
        Weekday::Saturday,
        Weekday::Sunday,
    ];

    /// Zero-based index with Monday = 0.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Weekday::Monday => "Mon",
            Weekday::Tuesday => "Tue",
            Weekday::Wednesday => "Wed",
            Weekday::Thursday => "Thu",
            Weekday::Friday => "Fri",
            Weekday::Saturday => "Sat",
            Weekday::Sunday => "Sun",
        }
    }
}

impl FromStr for Weekday {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Weekday::ALL
            .iter()
            .copied()
            .find(|d| {
                let full = format!("{d:?}").to_ascii_lowercase();
                lower == full || lower == d.short_name().to_ascii_lowercase()
            })
            .ok_or_else(|| DomainError::UnknownWeekday(s.to_string()))
    }
}

impl fmt::Display for Weekday {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl Serialize for Weekday {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.short_name())
    }
}

impl<'de> Deserialize<'de> for Weekday {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// UTC weekday of `t`.
pub fn weekday_of(t: Timestamp) -> Weekday {
    // 1970-01-01 was a Thursday (index 3).
    let idx = (t.days_since_epoch() + 3).rem_euclid(7) as usize;
    Weekday::ALL[idx]
}

/// Seconds elapsed since UTC midnight, in `[0, 86400)`.
pub fn seconds_of_day(t: Timestamp) -> u32 {
    t.seconds_utc().rem_euclid(SECONDS_PER_DAY) as u32
}

/// Four-byte card identifier, canonically eight uppercase hex characters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Uid(String);

impl Uid {
    /// Accepts either case and canonicalizes to uppercase.
    pub fn parse(raw: &str) -> Result<Self, DomainError> {
        if raw.len() != 8 || !raw.bytes().all(|c| c.is_ascii_hexdigit()) {
            return Err(DomainError::MalformedUid(raw.to_string()));
        }
        Ok(Uid(raw.to_ascii_uppercase()))
    }

    pub fn from_u32(v: u32) -> Self {
        Uid(format!("{v:08X}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Uid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Serialize for Uid {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for Uid {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Uid::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Device identifier of the form `<ROLE>_<number>`, e.g. `AC_001`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeviceId(String);

impl DeviceId {
    pub fn parse(raw: &str) -> Result<Self, DomainError> {
        let bad = || DomainError::MalformedDeviceId(raw.to_string());
        let (role, number) = raw.rsplit_once('_').ok_or_else(bad)?;
        let role_ok = !role.is_empty()
            && role
                .bytes()
                .all(|c| c.is_ascii_alphanumeric() || c == b'_' || c == b'-');
        let number_ok = !number.is_empty() && number.bytes().all(|c| c.is_ascii_digit());
        if role_ok && number_ok {
            Ok(DeviceId(raw.to_string()))
        } else {
            Err(bad())
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Serialize for DeviceId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for DeviceId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        DeviceId::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Per-card authorization: a daily time-of-day window (both ends
/// inclusive) and a set of allowed weekdays.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPolicy", into = "RawPolicy")]
pub struct AccessPolicy {
    uid: Uid,
    window_start: u32,
    window_end: u32,
    allowed_days: BTreeSet<Weekday>,
}

impl AccessPolicy {
    pub fn new(
        uid: Uid,
        window_start: u32,
        window_end: u32,
        allowed_days: impl IntoIterator<Item = Weekday>,
    ) -> Result<Self, DomainError> {
        for s in [window_start, window_end] {
            if s >= SECONDS_PER_DAY as u32 {
                return Err(DomainError::SecondOfDayOutOfRange(s));
            }
        }
        if window_start > window_end {
            return Err(DomainError::InvertedWindow {
                start: window_start,
                end: window_end,
            });
        }
        Ok(Self {
            uid,
            window_start,
            window_end,
            allowed_days: allowed_days.into_iter().collect(),
        })
    }

    pub fn uid(&self) -> &Uid {
        &self.uid
    }

    pub fn window_start(&self) -> u32 {
        self.window_start
    }

    pub fn window_end(&self) -> u32 {
        self.window_end
    }

    pub fn allowed_days(&self) -> &BTreeSet<Weekday> {
        &self.allowed_days
    }
}

/// Wire shape of a policy: times of day as `HH:MM:SS`, weekdays as short names.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    uid: Uid,
    window_start: String,
    window_end: String,
    allowed_days: Vec<Weekday>,
}

impl TryFrom<RawPolicy> for AccessPolicy {
    type Error = DomainError;

    fn try_from(raw: RawPolicy) -> Result<Self, Self::Error> {
        AccessPolicy::new(
            raw.uid,
            parse_time_of_day(&raw.window_start)?,
            parse_time_of_day(&raw.window_end)?,
            raw.allowed_days,
        )
    }
}

impl From<AccessPolicy> for RawPolicy {
    fn from(p: AccessPolicy) -> Self {
        RawPolicy {
            uid: p.uid,
            window_start: format_time_of_day(p.window_start),
            window_end: format_time_of_day(p.window_end),
            allowed_days: p.allowed_days.into_iter().collect(),
        }
    }
}

/// Parses `HH:MM` or `HH:MM:SS` into seconds of day.
pub fn parse_time_of_day(s: &str) -> Result<u32, DomainError> {
    let bad = || DomainError::MalformedTimeOfDay(s.to_string());
    let parts: Vec<&str> = s.split(':').collect();
    if !(2..=3).contains(&parts.len()) {
        return Err(bad());
    }
    let mut vals = [0u32; 3];
    for (slot, part) in vals.iter_mut().zip(&parts) {
        if part.len() != 2 || !part.bytes().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        *slot = part.parse().map_err(|_| bad())?;
    }
    let [h, m, sec] = vals;
    if h > 23 || m > 59 || sec > 59 {
        return Err(bad());
    }
    Ok(h * 3600 + m * 60 + sec)
}

pub fn format_time_of_day(sod: u32) -> String {
    format!("{:02}:{:02}:{:02}", sod / 3600, (sod / 60) % 60, sod % 60)
}

/// Source of the current time. Components never read wall time directly.
pub trait Clock {
    fn now(&self) -> Timestamp;
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock {
    now: Cell<Timestamp>,
}

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        Self {
            now: Cell::new(start),
        }
    }

    pub fn set(&self, t: Timestamp) {
        self.now.set(t);
    }

    pub fn advance(&self, d: Duration) {
        self.now.set(self.now.get() + d);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        self.now.get()
    }
}
