use serde::{Deserialize, Serialize};

use super::{Annotation, PsgError, Recording, Result};
use crate::stage::StageLabel;

/// `N` labeled epochs of `C` channels and `L` samples each.
///
/// Samples are stored in single precision (`N x C x L`, row-major); every
/// consumer widens to `f64` before computing. EDF sources carry 16 bits per
/// sample, so the narrower storage loses nothing they contain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSet {
    data: Vec<f32>,
    labels: Vec<StageLabel>,
    channel_labels: Vec<String>,
    rate: f64,
    epoch_seconds: f64,
    samples_per_epoch: usize,
    subject_ids: Vec<String>,
    scored: bool,
}

impl EpochSet {
    pub fn from_parts(
        data: Vec<f32>,
        labels: Vec<StageLabel>,
        channel_labels: Vec<String>,
        rate: f64,
        epoch_seconds: f64,
        subject_ids: Vec<String>,
    ) -> Result<Self> {
        let samples_per_epoch = (epoch_seconds * rate).round() as usize;
        if (samples_per_epoch as f64 - epoch_seconds * rate).abs() > 1e-9 || samples_per_epoch == 0 {
            return Err(PsgError::InvalidRate(format!(
                "{epoch_seconds} s at {rate} Hz is not a whole number of samples"
            )));
        }
        let n = labels.len();
        let c = channel_labels.len();
        if data.len() != n * c * samples_per_epoch || subject_ids.len() != n {
            return Err(PsgError::InvalidRecording(format!(
                "epoch tensor of {} values does not match {n} x {c} x {samples_per_epoch}",
                data.len()
            )));
        }
        Ok(EpochSet {
            data,
            labels,
            channel_labels,
            rate,
            epoch_seconds,
            samples_per_epoch,
            subject_ids,
            scored: true,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_channels(&self) -> usize {
        self.channel_labels.len()
    }

    pub fn samples_per_epoch(&self) -> usize {
        self.samples_per_epoch
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn epoch_seconds(&self) -> f64 {
        self.epoch_seconds
    }

    pub fn channel_labels(&self) -> &[String] {
        &self.channel_labels
    }

    pub fn channel_index(&self, label: &str) -> Option<usize> {
        self.channel_labels.iter().position(|l| l == label)
    }

    /// Stage labels. For sets built by [`EpochSet::unlabeled`] these are
    /// placeholders; check [`EpochSet::is_scored`].
    pub fn labels(&self) -> &[StageLabel] {
        &self.labels
    }

    pub fn is_scored(&self) -> bool {
        self.scored
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// All channels of epoch `n`, `C x L`.
    pub fn epoch(&self, n: usize) -> &[f32] {
        let stride = self.num_channels() * self.samples_per_epoch;
        &self.data[n * stride..(n + 1) * stride]
    }

    pub fn channel(&self, n: usize, c: usize) -> &[f32] {
        let l = self.samples_per_epoch;
        let e = self.epoch(n);
        &e[c * l..(c + 1) * l]
    }

    pub fn channel_f64(&self, n: usize, c: usize) -> Vec<f64> {
        self.channel(n, c).iter().map(|&v| v as f64).collect()
    }

    /// Every full epoch of a recording, without stage labels.
    pub fn unlabeled(recording: &Recording, epoch_seconds: f64, target_rate: f64) -> Result<Self> {
        let n = full_epochs(recording, epoch_seconds, target_rate)?;
        let annotations: Vec<Annotation> = (0..n)
            .map(|k| Annotation {
                onset: k as f64 * epoch_seconds,
                duration: epoch_seconds,
                stage: crate::stage::AnnotatedStage::Scored(StageLabel::Wake),
            })
            .collect();
        let mut set = segment_epochs(recording, &annotations, epoch_seconds, target_rate)?;
        set.scored = false;
        Ok(set)
    }

    /// Contiguous, time-ordered runs of epochs belonging to one subject.
    pub fn subject_runs(&self) -> Vec<std::ops::Range<usize>> {
        let mut runs = Vec::new();
        let mut start = 0;
        for i in 1..=self.len() {
            if i == self.len() || self.subject_ids[i] != self.subject_ids[start] {
                if i > start {
                    runs.push(start..i);
                }
                start = i;
            }
        }
        runs
    }

    /// Concatenate sets with identical channel layout.
    pub fn concat(sets: &[&EpochSet]) -> Result<EpochSet> {
        let first = sets
            .first()
            .ok_or_else(|| PsgError::InvalidRecording("no epoch sets to concatenate".into()))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut subjects = Vec::new();
        for s in sets {
            if s.channel_labels != first.channel_labels
                || s.rate != first.rate
                || s.samples_per_epoch != first.samples_per_epoch
            {
                return Err(PsgError::InvalidRecording("epoch sets have different layouts".into()));
            }
            data.extend_from_slice(&s.data);
            labels.extend_from_slice(&s.labels);
            subjects.extend_from_slice(&s.subject_ids);
        }
        let mut out = EpochSet::from_parts(
            data,
            labels,
            first.channel_labels.clone(),
            first.rate,
            first.epoch_seconds,
            subjects,
        )?;
        out.scored = sets.iter().all(|s| s.scored);
        Ok(out)
    }

    /// Copy of the epochs in `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> EpochSet {
        let stride = self.num_channels() * self.samples_per_epoch;
        EpochSet {
            data: self.data[range.start * stride..range.end * stride].to_vec(),
            labels: self.labels[range.clone()].to_vec(),
            channel_labels: self.channel_labels.clone(),
            rate: self.rate,
            epoch_seconds: self.epoch_seconds,
            samples_per_epoch: self.samples_per_epoch,
            subject_ids: self.subject_ids[range].to_vec(),
            scored: self.scored,
        }
    }
}

fn full_epochs(recording: &Recording, epoch_seconds: f64, target_rate: f64) -> Result<usize> {
    for ch in &recording.channels {
        if ch.sampling_rate != target_rate {
            return Err(PsgError::RateMismatch {
                channel: ch.label.clone(),
                expected: target_rate,
                actual: ch.sampling_rate,
            });
        }
    }
    let l = (epoch_seconds * target_rate).round() as usize;
    if l == 0 {
        return Err(PsgError::InvalidRate(format!("epoch of {epoch_seconds} s at {target_rate} Hz")));
    }
    let usable = recording.channels.iter().map(|c| c.samples.len()).min().unwrap_or(0);
    Ok(usable / l)
}

/// Keep only the listed channels, in the listed order.
pub fn select_channels(recording: &Recording, labels: &[String]) -> Result<Recording> {
    let channels = labels
        .iter()
        .map(|l| {
            recording
                .channel(l)
                .cloned()
                .ok_or_else(|| PsgError::ChannelMissing(l.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Recording::new(recording.id.clone(), channels)
}

/// Cut a recording into labeled epochs. Unscored epochs, epochs not covered
/// by any annotation, the trailing partial epoch and epochs with non-finite
/// samples are dropped.
pub fn segment_epochs(
    recording: &Recording,
    labels: &[Annotation],
    epoch_seconds: f64,
    target_rate: f64,
) -> Result<EpochSet> {
    let n_full = full_epochs(recording, epoch_seconds, target_rate)?;
    let l = (epoch_seconds * target_rate).round() as usize;

    let mut per_epoch: Vec<Option<StageLabel>> = vec![None; n_full];
    for a in labels {
        let start = a.onset / epoch_seconds;
        let count = a.duration / epoch_seconds;
        if (start - start.round()).abs() > 1e-6 || (count - count.round()).abs() > 1e-6 {
            return Err(PsgError::MisalignedAnnotation { onset: a.onset, epoch_seconds });
        }
        let start = start.round() as usize;
        for k in start..start + count.round() as usize {
            if k < n_full {
                per_epoch[k] = a.stage.scored();
            }
        }
    }

    let c = recording.channels.len();
    let mut data = Vec::with_capacity(n_full * c * l);
    let mut out_labels = Vec::new();
    let mut non_finite = 0usize;
    for (k, stage) in per_epoch.iter().enumerate() {
        let Some(stage) = stage else { continue };
        let finite = recording
            .channels
            .iter()
            .all(|ch| ch.samples[k * l..(k + 1) * l].iter().all(|v| v.is_finite()));
        if !finite {
            non_finite += 1;
            continue;
        }
        for ch in &recording.channels {
            data.extend(ch.samples[k * l..(k + 1) * l].iter().map(|&v| v as f32));
        }
        out_labels.push(*stage);
    }
    if non_finite > 0 {
        log::warn!("recording `{}`: dropped {non_finite} epochs with non-finite samples", recording.id);
    }
    if out_labels.is_empty() {
        return Err(PsgError::EmptyAfterFiltering(recording.id.clone()));
    }
    let n = out_labels.len();
    EpochSet::from_parts(
        data,
        out_labels,
        recording.channels.iter().map(|c| c.label.clone()).collect(),
        target_rate,
        epoch_seconds,
        vec![recording.id.clone(); n],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psg_io::{read_stage_labels, Channel, LabelOptions, LabelSchema};
    use crate::stage::AnnotatedStage;

    fn recording(channels: usize, rate: f64, seconds: f64) -> Recording {
        let n = (rate * seconds) as usize;
        Recording::new(
            "subj-1",
            (0..channels)
                .map(|c| Channel::new(format!("ch{c}"), rate, "uV", (0..n).map(|i| (i % 17) as f64 + c as f64).collect()))
                .collect(),
        )
        .unwrap()
    }

    fn ann(onset: f64, stage: Option<StageLabel>) -> Annotation {
        Annotation {
            onset,
            duration: 30.0,
            stage: stage.map_or(AnnotatedStage::Unscored, AnnotatedStage::Scored),
        }
    }

    #[test]
    fn nine_channel_two_hundred_hertz_epochs() {
        let rec = recording(9, 200.0, 60.0);
        let set = segment_epochs(&rec, &[ann(0.0, Some(StageLabel::Wake)), ann(30.0, Some(StageLabel::N2))], 30.0, 200.0)
            .unwrap();
        assert_eq!((set.len(), set.num_channels(), set.samples_per_epoch()), (2, 9, 6000));
        assert_eq!(set.labels(), &[StageLabel::Wake, StageLabel::N2]);
        assert_eq!(set.subject_ids(), &["subj-1".to_string(), "subj-1".to_string()]);
        // second epoch, channel 3 starts at sample 6000 of that channel
        assert_eq!(set.channel(1, 3)[0] as f64, rec.channels[3].samples[6000]);
    }

    #[test]
    fn trailing_partial_epoch_is_dropped() {
        let rec = recording(1, 100.0, 45.0);
        let set = segment_epochs(&rec, &[ann(0.0, Some(StageLabel::N1)), ann(30.0, Some(StageLabel::N1))], 30.0, 100.0)
            .unwrap();
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn unscored_epochs_are_dropped() {
        let rec = recording(2, 100.0, 90.0);
        let set = segment_epochs(
            &rec,
            &[ann(0.0, Some(StageLabel::Wake)), ann(30.0, None), ann(60.0, Some(StageLabel::N2))],
            30.0,
            100.0,
        )
        .unwrap();
        assert_eq!(set.labels(), &[StageLabel::Wake, StageLabel::N2]);
        assert_eq!(set.len() * set.samples_per_epoch(), 2 * 3000);
    }

    #[test]
    fn movement_rows_are_dropped_one_for_one() {
        let rows = ["0,30,W", "30,30,MOVEMENT", "60,30,2", "90,30,MOVEMENT", "120,30,4", "150,30,MOVEMENT", "180,30,R"];
        let movement = rows.iter().filter(|r| r.ends_with("MOVEMENT")).count();
        let labels = read_stage_labels(&rows.join("\n"), LabelOptions::new(LabelSchema::Rk)).unwrap();
        let rec = recording(1, 100.0, 30.0 * rows.len() as f64);
        let set = segment_epochs(&rec, &labels, 30.0, 100.0).unwrap();
        assert_eq!(rows.len() - set.len(), movement);
    }

    #[test]
    fn rate_mismatch_and_empty_errors() {
        let rec = recording(1, 100.0, 30.0);
        assert!(matches!(
            segment_epochs(&rec, &[ann(0.0, Some(StageLabel::Wake))], 30.0, 200.0),
            Err(PsgError::RateMismatch { .. })
        ));
        assert_eq!(
            segment_epochs(&rec, &[ann(0.0, None)], 30.0, 100.0).unwrap_err(),
            PsgError::EmptyAfterFiltering("subj-1".into())
        );
    }

    #[test]
    fn subject_runs_split_on_id_change() {
        let a = segment_epochs(&recording(1, 10.0, 90.0), &[ann(0.0, Some(StageLabel::N2)), ann(30.0, Some(StageLabel::N2))], 30.0, 10.0).unwrap();
        let mut rec_b = recording(1, 10.0, 30.0);
        rec_b.id = "subj-2".into();
        let b = segment_epochs(&rec_b, &[ann(0.0, Some(StageLabel::N3))], 30.0, 10.0).unwrap();
        let all = EpochSet::concat(&[&a, &b]).unwrap();
        assert_eq!(all.subject_runs(), vec![0..2, 2..3]);
    }
}
