use ndarray::{Array2, Array4, ArrayView2, Axis};

use super::calendar::{NoLeapDay, PeriodSpec, Season};
use crate::error::{Error, Result};

/// A `[time, channel, lat, lon]` field on a regular grid with a no-leap daily time axis.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    values: Array4<f64>,
    variables: Vec<String>,
    units: Vec<String>,
    lat: Vec<f64>,
    lon: Vec<f64>,
    time: Vec<NoLeapDay>,
}

fn strictly_monotone(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0]) || v.windows(2).all(|w| w[1] < w[0])
}

impl GridField {
    pub fn new(
        values: Array4<f64>,
        variables: Vec<String>,
        units: Vec<String>,
        lat: Vec<f64>,
        lon: Vec<f64>,
        time: Vec<NoLeapDay>,
    ) -> Result<Self> {
        let (t, c, h, w) = values.dim();
        let fail = |d: String| Err(Error::shape("GridField", d));
        if time.len() != t {
            return fail(format!("{} time stamps for {t} steps", time.len()));
        }
        if !time.windows(2).all(|w| w[1] > w[0]) {
            return fail("time stamps must be strictly increasing".into());
        }
        if variables.len() != c || units.len() != c {
            return fail(format!(
                "{c} channels but {} variable names and {} units",
                variables.len(),
                units.len()
            ));
        }
        if lat.len() != h || lon.len() != w {
            return fail(format!(
                "grid is {h}x{w} but coordinates are {}x{}",
                lat.len(),
                lon.len()
            ));
        }
        if !strictly_monotone(&lat) || !strictly_monotone(&lon) {
            return fail("coordinates must be strictly monotone".into());
        }
        let values = if values.is_standard_layout() {
            values
        } else {
            values.as_standard_layout().into_owned()
        };
        Ok(GridField {
            values,
            variables,
            units,
            lat,
            lon,
            time,
        })
    }

    /// Contiguous daily axis of `n_days` starting at `start`.
    pub fn daily_axis(start: NoLeapDay, n_days: usize) -> Vec<NoLeapDay> {
        (0..n_days as i64).map(|d| NoLeapDay(start.0 + d)).collect()
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array4<f64> {
        self.values
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn lat(&self) -> &[f64] {
        &self.lat
    }

    pub fn lon(&self) -> &[f64] {
        &self.lon
    }

    pub fn time(&self) -> &[NoLeapDay] {
        &self.time
    }

    pub fn n_time(&self) -> usize {
        self.values.dim().0
    }

    pub fn n_channels(&self) -> usize {
        self.values.dim().1
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        let (_, _, h, w) = self.values.dim();
        (h, w)
    }

    pub fn n_points(&self) -> usize {
        let (h, w) = self.grid_shape();
        h * w
    }

    /// First and last calendar year present.
    pub fn year_range(&self) -> (i32, i32) {
        (
            self.time.first().map_or(0, |d| d.year()),
            self.time.last().map_or(0, |d| d.year()),
        )
    }

    /// One channel flattened to `[time, lat*lon]` (gridpoint id `i * W + j`).
    pub fn channel_matrix(&self, channel: usize) -> Result<Array2<f64>> {
        if channel >= self.n_channels() {
            return Err(Error::shape(
                "channel_matrix",
                format!("channel {channel} of {}", self.n_channels()),
            ));
        }
        let t = self.n_time();
        let sub = self.values.index_axis(Axis(1), channel);
        Ok(sub
            .to_owned()
            .into_shape_with_order((t, self.n_points()))
            .expect("standard layout"))
    }

    /// Rebuilds a `[time, 1, H, W]` field with this field's grid from a
    /// `[time, H*W]` matrix.
    pub fn from_matrix(
        matrix: ArrayView2<f64>,
        variable: &str,
        unit: &str,
        lat: &[f64],
        lon: &[f64],
        time: Vec<NoLeapDay>,
    ) -> Result<Self> {
        let (t, g) = matrix.dim();
        if g != lat.len() * lon.len() {
            return Err(Error::shape(
                "from_matrix",
                format!("{g} columns for a {}x{} grid", lat.len(), lon.len()),
            ));
        }
        let values = matrix
            .to_owned()
            .into_shape_with_order((t, 1, lat.len(), lon.len()))
            .expect("standard layout");
        GridField::new(
            values,
            vec![variable.into()],
            vec![unit.into()],
            lat.to_vec(),
            lon.to_vec(),
            time,
        )
    }

    /// Stacks single-channel fields sharing grid and time axis into one field.
    pub fn stack_channels(fields: &[GridField]) -> Result<Self> {
        let first = fields
            .first()
            .ok_or_else(|| Error::Empty("no fields to stack".into()))?;
        for f in fields {
            if f.time != first.time || f.lat != first.lat || f.lon != first.lon {
                return Err(Error::shape("stack_channels", "fields differ in grid or time"));
            }
        }
        let views: Vec<_> = fields.iter().map(|f| f.values.view()).collect();
        let values = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::shape("stack_channels", e.to_string()))?;
        GridField::new(
            values,
            fields.iter().flat_map(|f| f.variables.clone()).collect(),
            fields.iter().flat_map(|f| f.units.clone()).collect(),
            first.lat.clone(),
            first.lon.clone(),
            first.time.clone(),
        )
    }

    /// Keeps the time steps at `indices` (must be increasing).
    pub fn take_time(&self, indices: &[usize]) -> Result<Self> {
        let values = self.values.select(Axis(0), indices);
        let time = indices.iter().map(|&i| self.time[i]).collect();
        GridField::new(
            values,
            self.variables.clone(),
            self.units.clone(),
            self.lat.clone(),
            self.lon.clone(),
            time,
        )
    }

    /// Same metadata, new values of identical shape.
    pub fn with_values(&self, values: Array4<f64>) -> Result<Self> {
        if values.dim() != self.values.dim() {
            return Err(Error::shape(
                "with_values",
                format!("{:?} vs {:?}", values.dim(), self.values.dim()),
            ));
        }
        GridField::new(
            values,
            self.variables.clone(),
            self.units.clone(),
            self.lat.clone(),
            self.lon.clone(),
            self.time.clone(),
        )
    }

    /// Time steps whose year lies in `period` (its season, if any, also applies).
    pub fn select_period(&self, period: &PeriodSpec) -> Result<Self> {
        let (first, last) = self.year_range();
        let out_of_range = || Error::PeriodOutOfRange {
            start: period.start_year,
            end: period.end_year,
            data_start: first,
            data_end: last,
        };
        if self.time.is_empty() || period.start_year < first || period.end_year > last {
            return Err(out_of_range());
        }
        let idx: Vec<usize> = (0..self.n_time())
            .filter(|&i| period.contains(self.time[i]))
            .collect();
        if idx.is_empty() {
            return Err(out_of_range());
        }
        if idx.len() == self.n_time() {
            return Ok(self.clone());
        }
        self.take_time(&idx)
    }

    /// Time steps whose month belongs to `season`, order preserved.
    pub fn filter_season(&self, season: Season) -> Result<Self> {
        let idx: Vec<usize> = (0..self.n_time())
            .filter(|&i| season.contains(self.time[i].month()))
            .collect();
        if idx.is_empty() {
            return Err(Error::Empty(format!("no time steps in season {season}")));
        }
        if idx.len() == self.n_time() {
            return Ok(self.clone());
        }
        self.take_time(&idx)
    }
}

/// Restricts both fields to their common time stamps.
pub fn align_time(a: &GridField, b: &GridField) -> Result<(GridField, GridField)> {
    if a.time == b.time {
        return Ok((a.clone(), b.clone()));
    }
    let (mut i, mut j) = (0, 0);
    let (mut ia, mut ib) = (Vec::new(), Vec::new());
    while i < a.time.len() && j < b.time.len() {
        match a.time[i].cmp(&b.time[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                ia.push(i);
                ib.push(j);
                i += 1;
                j += 1;
            }
        }
    }
    if ia.is_empty() {
        return Err(Error::Empty("the two fields share no time steps".into()));
    }
    Ok((a.take_time(&ia)?, b.take_time(&ib)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn daily_field(start_year: i32, end_year: i32) -> GridField {
        let days = ((end_year - start_year + 1) * 365) as usize;
        let values = Array4::from_shape_fn((days, 1, 2, 3), |(t, _, i, j)| t as f64 + 0.1 * (i * 3 + j) as f64);
        GridField::new(
            values,
            vec!["tas".into()],
            vec!["degC".into()],
            vec![30.0, 40.0],
            vec![-120.0, -110.0, -100.0],
            GridField::daily_axis(NoLeapDay::year_start(start_year), days),
        )
        .unwrap()
    }

    #[test]
    fn constructor_checks_invariants() {
        let f = daily_field(2000, 2000);
        let v = f.values().clone();
        let meta = |lat: Vec<f64>, time: Vec<NoLeapDay>| {
            GridField::new(v.clone(), vec!["a".into()], vec!["u".into()], lat, vec![0.0, 1.0, 2.0], time)
        };
        assert!(meta(vec![1.0, 1.0], f.time().to_vec()).is_err());
        assert!(meta(vec![1.0], f.time().to_vec()).is_err());
        assert!(meta(vec![1.0, 2.0], f.time()[1..].to_vec()).is_err());
        let mut rev = f.time().to_vec();
        rev.swap(0, 1);
        assert!(meta(vec![1.0, 2.0], rev).is_err());
        assert!(meta(vec![2.0, 1.0], f.time().to_vec()).is_ok());
    }

    #[test]
    fn select_period_day_counts() {
        let f = daily_field(1970, 2100);
        assert_eq!(f.n_time(), 131 * 365);
        let p = f.select_period(&PeriodSpec::new(2006, 2040).unwrap()).unwrap();
        assert_eq!(p.n_time(), 12_775);
        assert_eq!(p.time()[0], NoLeapDay::year_start(2006));
        let all = f.select_period(&PeriodSpec::new(1970, 2100).unwrap()).unwrap();
        assert_eq!(all, f);
        assert!(matches!(
            f.select_period(&PeriodSpec::new(2101, 2110).unwrap()),
            Err(Error::PeriodOutOfRange { .. })
        ));
    }

    #[test]
    fn select_period_is_idempotent() {
        let f = daily_field(1990, 2010);
        let p = PeriodSpec::new(1995, 2001).unwrap();
        let once = f.select_period(&p).unwrap();
        assert_eq!(once.select_period(&p).unwrap(), once);
    }

    #[test]
    fn filter_season_counts_and_partition() {
        let f = daily_field(2001, 2001);
        assert_eq!(f.filter_season(Season::summer()).unwrap().n_time(), 92);
        assert_eq!(f.filter_season(Season::from_months(&[2]).unwrap()).unwrap().n_time(), 28);
        assert_eq!(f.filter_season(Season::all()).unwrap(), f);

        let parts = [
            Season::from_months(&[12, 1, 2]).unwrap(),
            Season::from_months(&[3, 4, 5]).unwrap(),
            Season::summer(),
            Season::from_months(&[9, 10, 11]).unwrap(),
        ];
        let mut days: Vec<NoLeapDay> = parts
            .iter()
            .flat_map(|s| f.filter_season(*s).unwrap().time().to_vec())
            .collect();
        days.sort();
        assert_eq!(days, f.time());
    }

    #[test]
    fn filter_season_can_be_empty() {
        let f = daily_field(2001, 2001).select_period(&PeriodSpec::new(2001, 2001).unwrap().with_season(Season::winter())).unwrap();
        assert!(matches!(f.filter_season(Season::summer()), Err(Error::Empty(_))));
    }

    #[test]
    fn align_time_intersects() {
        let long = daily_field(1970, 2010);
        let short = daily_field(1980, 2002);
        let (a, b) = align_time(&long, &short).unwrap();
        assert_eq!(a.time(), short.time());
        assert_eq!(b, short);
        let (c, d) = align_time(&short, &short).unwrap();
        assert_eq!((c, d), (short.clone(), short.clone()));
        assert!(align_time(&daily_field(1970, 1971), &daily_field(1980, 1981)).is_err());
    }

    #[test]
    fn channel_matrix_layout() {
        let f = daily_field(2000, 2000);
        let m = f.channel_matrix(0).unwrap();
        assert_eq!(m.dim(), (365, 6));
        assert_eq!(m[[10, 4]], f.values()[[10, 0, 1, 1]]);
        let back = GridField::from_matrix(m.view(), "tas", "degC", f.lat(), f.lon(), f.time().to_vec()).unwrap();
        assert_eq!(back, f);
    }
}
