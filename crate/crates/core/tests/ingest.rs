use std::io::Write;

use mcssl::data::{ingest_table, SplitSpec, TableSchema};
use mcssl::Error;

fn table(name: &str, body: &str) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(name);
    std::fs::File::create(&path)
        .unwrap()
        .write_all(body.as_bytes())
        .unwrap();
    (dir, path)
}

fn whole() -> TableSchema {
    TableSchema {
        split: SplitSpec::Fractions {
            train: 1.0,
            priorfit: 0.0,
            test: 0.0,
        },
        ..TableSchema::new("y")
    }
}

#[test]
fn two_row_file_roundtrips() {
    let (_d, p) = table("t.csv", "a,b,y\n1,10,0\n3,10,1\n");
    let ds = ingest_table(&p, &whole()).unwrap();
    assert_eq!(ds.x.shape(), &[2, 1, 2]);
    // a standardizes to -1, 1; b is constant and becomes zeros
    assert_eq!(ds.x.data(), &[-1.0, 0.0, 1.0, 0.0]);
    assert_eq!(ds.y, vec![0, 1]);
    assert!(ds.x.is_finite());
}

#[test]
fn categorical_adds_one_column_per_level() {
    let (_d, p) = table(
        "t.tsv",
        "a\tcolour\ty\n1\tred\tno\n2\tblue\tyes\n3\tgreen\tno\n4\tred\tyes\n",
    );
    let schema = TableSchema {
        categorical: vec!["colour".into()],
        ..whole()
    };
    let ds = ingest_table(&p, &schema).unwrap();
    assert_eq!(ds.x.shape(), &[4, 1, 4]);
    assert_eq!(ds.num_classes, 2);
    assert_eq!(ds.y, vec![0, 1, 0, 1]);
}

#[test]
fn sequence_layout() {
    let (_d, p) = table("t.csv", "t0a,t0b,t1a,t1b,y\n1,2,3,4,0\n5,6,7,8,1\n");
    let schema = TableSchema {
        timesteps: 2,
        ..whole()
    };
    let ds = ingest_table(&p, &schema).unwrap();
    assert_eq!(ds.x.shape(), &[2, 2, 2]);
}

#[test]
fn located_errors() {
    let (_d, p) = table("t.csv", "a,y\n1,0\nfoo,1\n");
    match ingest_table(&p, &whole()) {
        Err(Error::Ingest { row, column, .. }) => {
            assert_eq!(row, 2);
            assert_eq!(column, "a");
        }
        other => panic!("{other:?}"),
    }

    let (_d, p) = table("t.csv", "a,b,y\n1,2,0\n1,0\n");
    assert!(matches!(
        ingest_table(&p, &whole()),
        Err(Error::Ingest { row: 2, .. })
    ));

    let (_d, p) = table("t.csv", "a,y\n1,cat\n2,dog\n");
    let schema = TableSchema {
        classes: Some(vec!["cat".into()]),
        ..whole()
    };
    match ingest_table(&p, &schema) {
        Err(Error::Ingest { row, column, .. }) => assert_eq!((row, column.as_str()), (2, "y")),
        other => panic!("{other:?}"),
    }
}
