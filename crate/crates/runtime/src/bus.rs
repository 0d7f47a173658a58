//! In-process typed topic bus. Every subscriber owns a bounded queue;
//! publishing never blocks and a full queue drops its oldest message.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use dronenav_core::control::Twist;
use dronenav_core::geom::{Pose2D, Transform2D};
use dronenav_core::mapping::OccupancyGrid;
use dronenav_core::nav::{Costmap, NavStatus, Path};
use dronenav_core::sensing::LaserScan;
use dronenav_core::vehicle::RigidBodyState;

pub const DEFAULT_DEPTH: usize = 16;

#[derive(Debug)]
struct Queue<T> {
    items: VecDeque<T>,
    capacity: usize,
    dropped: u64,
}

/// Bounded drop-oldest queue, shareable across threads.
#[derive(Debug)]
pub struct BoundedQueue<T> {
    inner: Mutex<Queue<T>>,
}

impl<T> BoundedQueue<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            inner: Mutex::new(Queue {
                items: VecDeque::with_capacity(capacity.min(1024)),
                capacity: capacity.max(1),
                dropped: 0,
            }),
        }
    }

    /// Appends `item`, evicting the oldest entry when full. Returns whether
    /// something was dropped.
    pub fn push(&self, item: T) -> bool {
        let mut q = self.inner.lock().expect("queue lock");
        let full = q.items.len() >= q.capacity;
        if full {
            q.items.pop_front();
            q.dropped += 1;
        }
        q.items.push_back(item);
        full
    }

    pub fn pop(&self) -> Option<T> {
        self.inner.lock().expect("queue lock").items.pop_front()
    }

    pub fn drain(&self) -> Vec<T> {
        self.inner.lock().expect("queue lock").items.drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("queue lock").items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped(&self) -> u64 {
        self.inner.lock().expect("queue lock").dropped
    }
}

pub struct Subscription<T> {
    queue: Arc<BoundedQueue<T>>,
}

impl<T> Subscription<T> {
    pub fn try_recv(&self) -> Option<T> {
        self.queue.pop()
    }

    pub fn drain(&self) -> Vec<T> {
        self.queue.drain()
    }

    pub fn dropped(&self) -> u64 {
        self.queue.dropped()
    }
}

pub struct Topic<T> {
    pub name: &'static str,
    latest: Option<T>,
    published: u64,
    subscribers: Vec<Arc<BoundedQueue<T>>>,
}

impl<T: Clone> Topic<T> {
    pub fn new(name: &'static str) -> Self {
        Self {
            name,
            latest: None,
            published: 0,
            subscribers: Vec::new(),
        }
    }

    pub fn subscribe(&mut self, depth: usize) -> Subscription<T> {
        let queue = Arc::new(BoundedQueue::new(depth));
        self.subscribers.push(queue.clone());
        Subscription { queue }
    }

    pub fn publish(&mut self, msg: T) {
        for s in &self.subscribers {
            s.push(msg.clone());
        }
        self.latest = Some(msg);
        self.published += 1;
    }

    pub fn latest(&self) -> Option<&T> {
        self.latest.as_ref()
    }

    pub fn stats(&self) -> TopicStats {
        TopicStats {
            name: self.name,
            published: self.published,
            dropped: self.subscribers.iter().map(|s| s.dropped()).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct TopicStats {
    pub name: &'static str,
    pub published: u64,
    pub dropped: u64,
}

/// One frame-tree edge update.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformUpdate {
    pub parent: &'static str,
    pub child: &'static str,
    pub transform: Transform2D,
    pub stamp: f64,
}

pub struct TopicBus {
    pub scan: Topic<Arc<LaserScan>>,
    pub twist_cmd: Topic<Twist>,
    pub truth_state: Topic<RigidBodyState>,
    pub slam_pose: Topic<Pose2D>,
    pub amcl_pose: Topic<Pose2D>,
    pub grid_snapshot: Topic<Arc<OccupancyGrid>>,
    pub costmap_snapshot: Topic<Arc<Costmap>>,
    pub path: Topic<Arc<Path>>,
    pub nav_status: Topic<NavStatus>,
    pub transform_updates: Topic<TransformUpdate>,
}

impl Default for TopicBus {
    fn default() -> Self {
        Self {
            scan: Topic::new("scan"),
            twist_cmd: Topic::new("twist_cmd"),
            truth_state: Topic::new("truth_state"),
            slam_pose: Topic::new("slam_pose"),
            amcl_pose: Topic::new("amcl_pose"),
            grid_snapshot: Topic::new("grid_snapshot"),
            costmap_snapshot: Topic::new("costmap_snapshot"),
            path: Topic::new("path"),
            nav_status: Topic::new("nav_status"),
            transform_updates: Topic::new("transform_updates"),
        }
    }
}

impl TopicBus {
    pub fn stats(&self) -> Vec<TopicStats> {
        vec![
            self.scan.stats(),
            self.twist_cmd.stats(),
            self.truth_state.stats(),
            self.slam_pose.stats(),
            self.amcl_pose.stats(),
            self.grid_snapshot.stats(),
            self.costmap_snapshot.stats(),
            self.path.stats(),
            self.nav_status.stats(),
            self.transform_updates.stats(),
        ]
    }
}
