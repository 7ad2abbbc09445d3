use stormtail_core::data::INDEX_FILE;

use crate::dataset::generate;
use crate::error::CliResult;
use crate::manifest::Outputs;
use crate::Ctx;

pub fn datagen(ctx: &Ctx) -> CliResult<()> {
    let mut cfg = ctx.cfg.clone();
    if let Some(s) = ctx.seed {
        cfg.data.seed = s;
    }
    let schema = cfg.threshold_schema()?;
    let index = generate(&cfg, &schema, &ctx.out)?;
    let mut outputs = Outputs::new(&ctx.out);
    outputs.record(&ctx.out.join(INDEX_FILE));
    for s in &index.shards {
        outputs.record(&ctx.out.join(&s.file));
    }
    log::info!("wrote {} samples in {} shards", index.total_samples(), index.shards.len());
    let seed = cfg.data.seed;
    let mut snapshot = ctx.clone();
    snapshot.cfg = cfg;
    snapshot.finish("datagen", None, vec![seed], Vec::new(), &outputs)
}
