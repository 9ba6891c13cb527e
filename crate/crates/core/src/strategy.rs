//! Server-side aggregation strategies.
//!
//! `FedPsa` buffers updates together with the cosine `kappa` between the
//! client's sensitivity sketch and the global one (taken at receipt). Until
//! the training thermometer has filled once, a full buffer is averaged
//! uniformly; afterwards its weights are `softmax(kappa / Temp)` with
//! `Temp = (M_cur / M0) * gamma + delta`.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::params::ParamVector;
use crate::sensitivity::{cosine, SensitivitySketch, Sketcher};

/// A client's upload.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateEnvelope {
    pub client_id: usize,
    /// `w_after - w_start`
    pub delta: ParamVector,
    pub sketch: Option<SensitivitySketch>,
    pub origin_version: u64,
    pub upload_time: u64,
    /// `||delta||^2`
    pub magnitude: f64,
    pub data_size: usize,
}

const ENVELOPE_MAGIC: [u8; 4] = *b"FPSE";
const ENVELOPE_VERSION: u8 = 1;

impl UpdateEnvelope {
    pub fn new(
        client_id: usize,
        delta: ParamVector,
        sketch: Option<SensitivitySketch>,
        origin_version: u64,
        upload_time: u64,
        data_size: usize,
    ) -> Self {
        let magnitude = delta.norm_sq();
        UpdateEnvelope {
            client_id,
            delta,
            sketch,
            origin_version,
            upload_time,
            magnitude,
            data_size,
        }
    }

    /// Binary wire form: magic, format version, then little-endian fields;
    /// delta and sketch are length-prefixed `f64` arrays (sketch length 0 = absent).
    pub fn encode(&self) -> Vec<u8> {
        let k = self.sketch.as_ref().map_or(0, |s| s.dim());
        let mut out = Vec::with_capacity(53 + 8 * (self.delta.dim() + k));
        out.extend_from_slice(&ENVELOPE_MAGIC);
        out.push(ENVELOPE_VERSION);
        for v in [
            self.client_id as u64,
            self.origin_version,
            self.upload_time,
            self.data_size as u64,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.magnitude.to_le_bytes());
        let mut floats = |values: &[f64]| {
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        floats(&self.delta);
        floats(self.sketch.as_ref().map_or(&[][..], |s| &s.0[..]));
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Reader { bytes, pos: 0 };
        if cursor.take(4)? != ENVELOPE_MAGIC {
            return Err(Error::Envelope("bad magic".into()));
        }
        let version = cursor.take(1)?[0];
        if version != ENVELOPE_VERSION {
            return Err(Error::Envelope(format!("unsupported format version {version}")));
        }
        let client_id = cursor.u64()? as usize;
        let origin_version = cursor.u64()?;
        let upload_time = cursor.u64()?;
        let data_size = cursor.u64()? as usize;
        let magnitude = f64::from_bits(cursor.u64()?);
        let delta = ParamVector::new(cursor.floats()?);
        let sketch = cursor.floats()?;
        if cursor.pos != bytes.len() {
            return Err(Error::Envelope(format!(
                "{} trailing bytes",
                bytes.len() - cursor.pos
            )));
        }
        Ok(UpdateEnvelope {
            client_id,
            delta,
            sketch: (!sketch.is_empty()).then_some(SensitivitySketch(sketch)),
            origin_version,
            upload_time,
            magnitude,
            data_size,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Envelope(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Envelope("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Fixed-size FIFO of recent update magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermometerQueue {
    entries: VecDeque<f64>,
    capacity: usize,
    m0: Option<f64>,
    m0_clamped: bool,
    gamma: f64,
    delta: f64,
}

impl ThermometerQueue {
    pub fn new(capacity: usize, gamma: f64, delta: f64) -> Result<Self> {
        if capacity == 0 || !(delta > 0.0) || !(gamma >= 0.0) {
            return Err(Error::Config(vec![format!(
                "thermometer needs L_q >= 1, gamma >= 0, delta > 0 (got {capacity}, {gamma}, {delta})"
            )]));
        }
        Ok(ThermometerQueue {
            entries: VecDeque::with_capacity(capacity),
            capacity,
            m0: None,
            m0_clamped: false,
            gamma,
            delta,
        })
    }

    pub fn push(&mut self, magnitude: f64) {
        debug_assert!(magnitude >= 0.0);
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(magnitude);
        if self.m0.is_none() && self.entries.len() == self.capacity {
            let mean = self.mean();
            if mean > 0.0 {
                self.m0 = Some(mean);
            } else {
                self.m0 = Some(f64::EPSILON);
                self.m0_clamped = true;
            }
        }
    }

    /// `M_cur`, the mean of the queued magnitudes.
    pub fn mean(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.entries.iter().sum::<f64>() / self.entries.len() as f64
        }
    }

    /// Mean at the moment the queue first filled.
    pub fn m0(&self) -> Option<f64> {
        self.m0
    }

    pub fn m0_clamped(&self) -> bool {
        self.m0_clamped
    }

    pub fn is_ready(&self) -> bool {
        self.m0.is_some()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// `(M_cur / M0) * gamma + delta`, or `None` before the queue has first filled.
pub fn current_temperature(thermo: &ThermometerQueue) -> Option<f64> {
    thermo
        .m0
        .map(|m0| (thermo.mean() / m0) * thermo.gamma + thermo.delta)
}

/// `exp(kappa_i / temp) / sum_j exp(kappa_j / temp)`, max-shifted.
pub fn softmax_weights(kappas: &[f64], temp: f64) -> Result<Vec<f64>> {
    if kappas.is_empty() || !(temp > 0.0) {
        return Err(Error::Contract(format!(
            "softmax needs a nonempty list and temp > 0 (got {} values, temp {temp})",
            kappas.len()
        )));
    }
    let max = kappas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = kappas.iter().map(|k| ((k - max) / temp).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferSlot {
    pub envelope: UpdateEnvelope,
    pub kappa: f64,
    /// Version gap at receipt.
    pub tau: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationBuffer {
    slots: Vec<BufferSlot>,
    capacity: usize,
}

impl AggregationBuffer {
    pub fn new(capacity: usize) -> Self {
        AggregationBuffer {
            slots: Vec::with_capacity(capacity),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() >= self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn slots(&self) -> &[BufferSlot] {
        &self.slots
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsaVariant {
    #[default]
    Full,
    /// Temperature frozen at `gamma + delta`.
    NoTemperature,
    /// Kappa from projected raw parameters instead of sensitivities.
    NoSensitivity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsaParams {
    pub buffer: usize,
    pub queue: usize,
    pub gamma: f64,
    pub delta: f64,
    pub variant: PsaVariant,
    /// When false the thermometer never fills and every aggregation is uniform.
    pub thermometer: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Strategy {
    FedAvg { weight_by_size: bool },
    FedAsync { a0: f64 },
    FedBuff { buffer: usize },
    FedPsa(PsaParams),
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FedAvg { .. } => "fedavg",
            Strategy::FedAsync { .. } => "fedasync",
            Strategy::FedBuff { .. } => "fedbuff",
            Strategy::FedPsa(p) => match p.variant {
                PsaVariant::Full => "fedpsa",
                PsaVariant::NoTemperature => "fedpsa_no_t",
                PsaVariant::NoSensitivity => "fedpsa_no_s",
            },
        }
    }

    pub fn is_synchronous(&self) -> bool {
        matches!(self, Strategy::FedAvg { .. })
    }

    pub fn uses_sketches(&self) -> bool {
        matches!(self, Strategy::FedPsa(_))
    }
}

/// One application of client updates to the global model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationEvent {
    pub version: u64,
    pub virtual_time: u64,
    pub strategy: String,
    pub temperature: Option<f64>,
    /// Thermometer mean `M_cur` and reference `M0` when the temperature was read.
    pub queue_mean: Option<f64>,
    pub queue_m0: Option<f64>,
    pub kappas: Vec<f64>,
    pub weights: Vec<f64>,
    pub client_ids: Vec<usize>,
    pub staleness_taus: Vec<u64>,
}

/// Outcome of handing one envelope to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct Receipt {
    pub kappa: Option<f64>,
    pub tau: u64,
    pub events: Vec<AggregationEvent>,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    global: ParamVector,
    version: u64,
    strategy: Strategy,
    buffer: AggregationBuffer,
    thermometer: Option<ThermometerQueue>,
    global_sketch: Option<SensitivitySketch>,
    sketcher: Option<Arc<Sketcher>>,
}

impl ServerState {
    /// `sketcher` is required for `FedPsa` and ignored otherwise.
    pub fn new(initial: ParamVector, strategy: Strategy, sketcher: Option<Arc<Sketcher>>) -> Result<Self> {
        let (buffer, thermometer) = match strategy {
            Strategy::FedPsa(p) => {
                if p.buffer == 0 {
                    return Err(Error::Config(vec!["buffer size L_s must be >= 1".into()]));
                }
                let thermo = ThermometerQueue::new(p.queue, p.gamma, p.delta)?;
                (p.buffer, p.thermometer.then_some(thermo))
            }
            Strategy::FedBuff { buffer } => {
                if buffer == 0 {
                    return Err(Error::Config(vec!["buffer size L_s must be >= 1".into()]));
                }
                (buffer, None)
            }
            Strategy::FedAsync { a0 } => {
                if !(a0 > 0.0) {
                    return Err(Error::Config(vec![format!("fedasync a0 must be > 0, got {a0}")]));
                }
                (1, None)
            }
            Strategy::FedAvg { .. } => (1, None),
        };
        let sketcher = if strategy.uses_sketches() {
            let s = sketcher.ok_or_else(|| {
                Error::Config(vec!["fedpsa requires a calibration batch and projection".into()])
            })?;
            check_dim("projection width", initial.dim(), s.projection.d())?;
            Some(s)
        } else {
            None
        };
        let mut state = ServerState {
            global: initial,
            version: 0,
            strategy,
            buffer: AggregationBuffer::new(buffer),
            thermometer,
            global_sketch: None,
            sketcher,
        };
        state.refresh_global_sketch()?;
        Ok(state)
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn strategy(&self) -> &Strategy {
        &self.strategy
    }

    pub fn buffer(&self) -> &AggregationBuffer {
        &self.buffer
    }

    pub fn thermometer(&self) -> Option<&ThermometerQueue> {
        self.thermometer.as_ref()
    }

    pub fn global_sketch(&self) -> Option<&SensitivitySketch> {
        self.global_sketch.as_ref()
    }

    pub fn sketcher(&self) -> Option<&Arc<Sketcher>> {
        self.sketcher.as_ref()
    }

    fn refresh_global_sketch(&mut self) -> Result<()> {
        if let Some(s) = &self.sketcher {
            self.global_sketch = Some(s.sketch_params(&self.global)?);
        }
        Ok(())
    }

    fn check_envelope(&self, env: &UpdateEnvelope) -> Result<u64> {
        check_dim("update delta", self.global.dim(), env.delta.dim())?;
        if env.origin_version > self.version {
            return Err(Error::Contract(format!(
                "update from version {} received at server version {}",
                env.origin_version, self.version
            )));
        }
        Ok(self.version - env.origin_version)
    }

    /// Handles one asynchronous upload received at `now`.
    pub fn receive_update(&mut self, env: UpdateEnvelope, now: u64) -> Result<Receipt> {
        let tau = self.check_envelope(&env)?;
        match self.strategy {
            Strategy::FedAvg { .. } => Err(Error::Contract(
                "fedavg is synchronous; use run_fedavg_round".into(),
            )),
            Strategy::FedAsync { .. } => {
                let event = self.apply_fedasync(env, now)?;
                Ok(Receipt {
                    kappa: None,
                    tau,
                    events: vec![event],
                })
            }
            Strategy::FedBuff { .. } => {
                self.buffer.slots.push(BufferSlot {
                    envelope: env,
                    kappa: 0.0,
                    tau,
                });
                let events = if self.buffer.is_full() {
                    vec![self.aggregate_fedbuff(now)?]
                } else {
                    Vec::new()
                };
                Ok(Receipt {
                    kappa: None,
                    tau,
                    events,
                })
            }
            Strategy::FedPsa(_) => {
                let client_sketch = env
                    .sketch
                    .as_ref()
                    .ok_or_else(|| Error::Contract("fedpsa envelope without sketch".into()))?;
                let global_sketch = self.global_sketch.as_ref().expect("refreshed on every version");
                check_dim("sketch", global_sketch.dim(), client_sketch.dim())?;
                let kappa = cosine(client_sketch, global_sketch)?;
                if let Some(thermo) = &mut self.thermometer {
                    thermo.push(env.magnitude);
                }
                self.buffer.slots.push(BufferSlot {
                    envelope: env,
                    kappa,
                    tau,
                });
                let events = if self.buffer.is_full() {
                    vec![self.aggregate_fedpsa(now)?]
                } else {
                    Vec::new()
                };
                Ok(Receipt {
                    kappa: Some(kappa),
                    tau,
                    events,
                })
            }
        }
    }

    /// Temperature the next FedPSA aggregation would use; `None` in the uniform phase.
    pub fn psa_temperature(&self) -> Option<f64> {
        let Strategy::FedPsa(p) = self.strategy else {
            return None;
        };
        let thermo = self.thermometer.as_ref()?;
        let temp = current_temperature(thermo)?;
        Some(match p.variant {
            PsaVariant::NoTemperature => p.gamma + p.delta,
            _ => temp,
        })
    }

    fn aggregate_fedpsa(&mut self, now: u64) -> Result<AggregationEvent> {
        let kappas: Vec<f64> = self.buffer.slots.iter().map(|s| s.kappa).collect();
        let temperature = self.psa_temperature();
        let weights = match temperature {
            Some(t) => softmax_weights(&kappas, t)?,
            None => uniform_weights(kappas.len()),
        };
        let mut event = self.apply_buffer(&weights, temperature, kappas, now)?;
        if let Some(thermo) = self.thermometer.as_ref().filter(|_| temperature.is_some()) {
            event.queue_mean = Some(thermo.mean());
            event.queue_m0 = thermo.m0();
        }
        Ok(event)
    }

    fn aggregate_fedbuff(&mut self, now: u64) -> Result<AggregationEvent> {
        let weights = uniform_weights(self.buffer.len());
        self.apply_buffer(&weights, None, Vec::new(), now)
    }

    fn apply_buffer(
        &mut self,
        weights: &[f64],
        temperature: Option<f64>,
        kappas: Vec<f64>,
        now: u64,
    ) -> Result<AggregationEvent> {
        let slots = std::mem::take(&mut self.buffer.slots);
        let deltas: Vec<&ParamVector> = slots.iter().map(|s| &s.envelope.delta).collect();
        self.apply_weighted(&deltas, weights)?;
        Ok(self.finish_version(
            now,
            temperature,
            kappas,
            weights.to_vec(),
            slots.iter().map(|s| s.envelope.client_id).collect(),
            slots.iter().map(|s| s.tau).collect(),
        )?)
    }

    fn apply_weighted(&mut self, deltas: &[&ParamVector], weights: &[f64]) -> Result<()> {
        let mut next = self.global.clone();
        for (delta, &w) in deltas.iter().zip(weights) {
            next.add_scaled(w, delta)?;
        }
        if !next.is_finite() {
            return Err(Error::Numeric(format!(
                "aggregation at version {} produced non-finite parameters",
                self.version
            )));
        }
        self.global = next;
        Ok(())
    }

    fn finish_version(
        &mut self,
        now: u64,
        temperature: Option<f64>,
        kappas: Vec<f64>,
        weights: Vec<f64>,
        client_ids: Vec<usize>,
        staleness_taus: Vec<u64>,
    ) -> Result<AggregationEvent> {
        self.version += 1;
        self.refresh_global_sketch()?;
        Ok(AggregationEvent {
            version: self.version,
            virtual_time: now,
            strategy: self.strategy.name().to_string(),
            temperature,
            queue_mean: None,
            queue_m0: None,
            kappas,
            weights,
            client_ids,
            staleness_taus,
        })
    }

    /// `w_g += a0 / sqrt(tau + 1) * delta`, applied immediately.
    pub fn apply_fedasync(&mut self, env: UpdateEnvelope, now: u64) -> Result<AggregationEvent> {
        let Strategy::FedAsync { a0 } = self.strategy else {
            return Err(Error::Contract("apply_fedasync on a non-fedasync server".into()));
        };
        let tau = self.check_envelope(&env)?;
        let weight = fedasync_weight(a0, tau);
        self.apply_weighted(&[&env.delta], &[weight])?;
        self.finish_version(now, None, Vec::new(), vec![weight], vec![env.client_id], vec![tau])
    }

    /// One synchronous round: the (optionally size-weighted) mean of all deltas.
    pub fn run_fedavg_round(&mut self, results: &[UpdateEnvelope], now: u64) -> Result<AggregationEvent> {
        let Strategy::FedAvg { weight_by_size } = self.strategy else {
            return Err(Error::Contract("run_fedavg_round on a non-fedavg server".into()));
        };
        if results.is_empty() {
            return Err(Error::Contract("fedavg round without client results".into()));
        }
        let mut taus = Vec::with_capacity(results.len());
        for env in results {
            taus.push(self.check_envelope(env)?);
        }
        let weights = if weight_by_size {
            let total: usize = results.iter().map(|e| e.data_size).sum();
            if total == 0 {
                return Err(Error::Contract("fedavg size weighting with zero total size".into()));
            }
            results
                .iter()
                .map(|e| e.data_size as f64 / total as f64)
                .collect()
        } else {
            uniform_weights(results.len())
        };
        let deltas: Vec<&ParamVector> = results.iter().map(|e| &e.delta).collect();
        self.apply_weighted(&deltas, &weights)?;
        self.finish_version(
            now,
            None,
            Vec::new(),
            weights,
            results.iter().map(|e| e.client_id).collect(),
            taus,
        )
    }
}

/// FedAsync staleness weight `a0 / sqrt(tau + 1)`.
pub fn fedasync_weight(a0: f64, tau: u64) -> f64 {
    a0 / ((tau + 1) as f64).sqrt()
}
