//! Embedded document store: inserts, a hash index, an aggregation pipeline
//! and a chunked model blob, all surviving a reopen.
//!
//!     cargo run --example docstore

use coldchain::docstore::{AggregationPipeline, Document, Store};
use serde_json::json;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let model_id = {
        let mut store = Store::open(dir.path())?;
        let docs = (0..12)
            .map(|i| {
                Document::from_value(json!({
                    "_id": format!("r{i:02}"),
                    "fridge": format!("C{}", i % 3),
                    "temp": 2.0 + 0.25 * i as f64,
                    "defrost": i % 4 == 0,
                }))
                .unwrap()
            })
            .collect();
        store.insert_many("readings", docs)?;
        store.create_index("readings", "fridge")?;
        let id = store.put_model(Document::from_value(json!({ "name": "demo" })).unwrap(), &[7u8; 300_000])?;
        println!("stored model {id}");
        id
    };

    let store = Store::open_reader(dir.path())?;
    println!("{} readings, indexes {:?}", store.count("readings"), store.indexes("readings"));
    let (meta, blob) = store.get_model(&model_id)?;
    println!("model {} back: {} bytes", meta.get_str("name").unwrap_or("?"), blob.len());
    for doc in store.find_eq("readings", "fridge", &json!("C1")) {
        println!("  C1: {}", doc.to_canonical_json());
    }
    let pipeline = AggregationPipeline::parse(
        r#"[
            {"$match": {"defrost": false}},
            {"$group": {"_id": "$fridge", "n": {"$count": {}}, "mean": {"$avg": "$temp"}, "hi": {"$max": "$temp"}}},
            {"$sort": {"_id": 1}}
        ]"#,
    )?;
    for row in store.aggregate("readings", &pipeline)? {
        println!("{}", row.to_canonical_json());
    }
    Ok(())
}
