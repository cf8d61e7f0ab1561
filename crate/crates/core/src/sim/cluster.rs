use crate::protocol::{initiate_flatten, CoreEndpoint, FlattenOutcome, LocalEdit, Operation, ProtocolError, Role, Site};
use crate::tid::SiteId;

/// Core sites wired together synchronously: every local operation is
/// delivered to all other sites before the call returns.
#[derive(Clone, Debug)]
pub struct Cluster {
    sites: Vec<Site>,
    round: u64,
}

impl Cluster {
    pub fn new(site_count: usize) -> Self {
        let sites = (0..site_count.max(1)).map(|i| Site::new(SiteId::from(format!("s{i}").as_str()), Role::Core)).collect();
        Cluster { sites, round: 0 }
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn site(&self, i: usize) -> &Site {
        &self.sites[i]
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn submit(&mut self, i: usize, edit: LocalEdit) -> Result<Operation, ProtocolError> {
        let op = self.sites[i].submit_local(edit)?;
        self.sites[i].take_outbox();
        for (j, s) in self.sites.iter_mut().enumerate() {
            if j != i {
                s.deliver(op.clone());
            }
        }
        Ok(op)
    }

    /// Runs a flatten round coordinated by site 0.
    pub fn flatten(&mut self) -> Result<FlattenOutcome, ProtocolError> {
        self.round += 1;
        let (coordinator, rest) = self.sites.split_first_mut().expect("a cluster has a site");
        let mut members: Vec<&mut dyn CoreEndpoint> = rest.iter_mut().map(|s| s as &mut dyn CoreEndpoint).collect();
        initiate_flatten(coordinator, &mut members, self.round)
    }
}
