//! Per-session event log with replay for late subscribers.
//!
//! Every event gets a session-wide sequence number starting at 1. A new
//! subscriber receives the current run (or the latest finished one) from
//! its first event, then follows live events of this and later runs.

use std::collections::VecDeque;
use std::convert::Infallible;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::response::sse::{Event, KeepAlive, Sse};
use futures::Stream;
use serde_json::{json, Value};
use tokio::sync::watch;

use capy_core::eda::LoopEvent;

#[derive(Debug, Clone, PartialEq)]
pub struct LoggedEvent {
    pub seq: u64,
    pub run_id: u64,
    pub kind: String,
    /// Full payload, including `seq`, `run_id` and `kind`.
    pub data: Value,
}

#[derive(Default)]
struct Inner {
    events: Vec<Arc<LoggedEvent>>,
    /// Index of the first event of the latest run.
    run_start: usize,
    next_run: u64,
    active: Option<u64>,
}

pub struct EventLog {
    inner: Mutex<Inner>,
    latest: watch::Sender<u64>,
}

impl Default for EventLog {
    fn default() -> Self {
        EventLog { inner: Mutex::new(Inner::default()), latest: watch::channel(0).0 }
    }
}

impl EventLog {
    /// Opens a new run and returns its id.
    pub fn start_run(&self) -> u64 {
        let mut inner = self.inner.lock().unwrap();
        inner.next_run += 1;
        inner.run_start = inner.events.len();
        inner.active = Some(inner.next_run);
        inner.next_run
    }

    fn push_locked(&self, inner: &mut Inner, run_id: u64, kind: &str, mut data: Value) -> u64 {
        let seq = inner.events.len() as u64 + 1;
        let obj = data.as_object_mut().expect("event payload is an object");
        obj.insert("seq".into(), json!(seq));
        obj.insert("run_id".into(), json!(run_id));
        obj.insert("kind".into(), json!(kind));
        inner.events.push(Arc::new(LoggedEvent { seq, run_id, kind: kind.to_string(), data }));
        self.latest.send_replace(seq);
        seq
    }

    /// Appends a loop event. A terminal event closes the run.
    pub fn push_loop(&self, run_id: u64, event: &LoopEvent) -> u64 {
        let mut inner = self.inner.lock().unwrap();
        let seq = self.push_locked(&mut inner, run_id, event.name(), serde_json::to_value(event).unwrap());
        if event.is_terminal() && inner.active == Some(run_id) {
            inner.active = None;
        }
        seq
    }

    /// Appends a heartbeat if `run_id` is still active.
    pub fn push_heartbeat(&self, run_id: u64, elapsed_ms: u64, cells: usize) -> Option<u64> {
        let mut inner = self.inner.lock().unwrap();
        if inner.active != Some(run_id) {
            return None;
        }
        Some(self.push_locked(&mut inner, run_id, "heartbeat", json!({ "elapsed_ms": elapsed_ms, "cells": cells })))
    }

    pub fn active_run(&self) -> Option<u64> {
        self.inner.lock().unwrap().active
    }

    /// Sequence number a new subscriber starts from: just after `after` if
    /// given, else the first event of the latest run.
    pub fn replay_from(&self, after: Option<u64>) -> u64 {
        match after {
            Some(seq) => seq + 1,
            None => {
                let inner = self.inner.lock().unwrap();
                inner.events.get(inner.run_start).map_or(inner.events.len() as u64 + 1, |e| e.seq)
            }
        }
    }

    /// Events with `seq >= from`.
    pub fn since(&self, from: u64) -> Vec<Arc<LoggedEvent>> {
        let inner = self.inner.lock().unwrap();
        let start = (from.max(1) - 1) as usize;
        inner.events.get(start..).map(<[_]>::to_vec).unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Live stream of events from `from` on. Never ends on its own.
    pub fn stream(self: &Arc<Self>, from: u64) -> impl Stream<Item = Arc<LoggedEvent>> + Send + 'static {
        // Subscribe before the first read so no push can fall between them.
        let rx = self.latest.subscribe();
        let state = (self.clone(), rx, from, VecDeque::new());
        futures::stream::unfold(state, |(log, mut rx, mut next, mut buf)| async move {
            loop {
                if let Some(event) = buf.pop_front() {
                    return Some((event, (log, rx, next, buf)));
                }
                let batch = log.since(next);
                if let Some(last) = batch.last() {
                    next = last.seq + 1;
                    buf.extend(batch);
                    continue;
                }
                rx.changed().await.ok()?;
            }
        })
    }
}

pub fn to_sse(event: &LoggedEvent) -> Event {
    Event::default().id(event.seq.to_string()).event(&event.kind).data(event.data.to_string())
}

pub fn sse_response(
    log: &Arc<EventLog>,
    from: u64,
) -> Sse<impl Stream<Item = Result<Event, Infallible>> + Send + 'static> {
    use futures::StreamExt as _;
    let stream = log.stream(from).map(|e| Ok(to_sse(&e)));
    Sse::new(stream).keep_alive(KeepAlive::new().interval(Duration::from_secs(15)))
}
