use capy_core::clarifier::{Clarifier, ClarifyError, ThreadStore};
use capy_core::gateway::{Gateway, ScriptEntry};
use capy_core::notebook::{CellKind, Notebook, Provenance};
use capy_core::prompts::PromptAssets;

fn notebook() -> (Notebook, String, String) {
    let mut nb = Notebook::new();
    let a = nb.append_cell(CellKind::Code, "df = pd.read_csv('pay_gap.csv')", Provenance::User);
    let b = nb.append_cell(CellKind::Code, "df.groupby('Industry')['Gap'].mean().nlargest(3)", Provenance::Assistant);
    (nb, a, b)
}

#[tokio::test]
async fn prompt_contains_context_cell_thread_question_in_order() {
    let (nb, _, b) = notebook();
    let gateway = Gateway::scripted(vec![
        ScriptEntry::expecting("nlargest(3)", "It keeps the three largest means."),
        ScriptEntry::expecting("It keeps the three largest means.", "Use nsmallest."),
    ]);
    let prompts = PromptAssets::default();
    let clarifier = Clarifier { gateway: &gateway, prompts: &prompts, context_budget: 8000 };
    let mut store = ThreadStore::default();

    let messages = clarifier.messages(&nb, &store.open_thread(&nb, &b).unwrap(), "Why nlargest?").unwrap();
    let text = &messages[0].content;
    let at = |needle: &str| text.find(needle).unwrap_or_else(|| panic!("missing {needle}"));
    assert!(at("## Notebook") < at("## Selected cell"));
    assert!(at("## Selected cell") < at("## Earlier questions"));
    assert!(at("## Earlier questions") < at("Why nlargest?"));

    store.ask(&clarifier, &nb, &b, "What does nlargest do?").await.unwrap();
    assert_eq!(store.get(&b).unwrap().turns.len(), 1);
    let answer = store.ask(&clarifier, &nb, &b, "And the smallest?").await.unwrap();
    assert_eq!(answer, "Use nsmallest.");
    assert_eq!(store.get(&b).unwrap().turns.len(), 2);
}

#[tokio::test]
async fn asking_never_touches_the_notebook_or_other_threads() {
    let (nb, a, b) = notebook();
    let before = nb.clone();
    let gateway = Gateway::scripted(vec![ScriptEntry::reply("one"), ScriptEntry::reply("two"), ScriptEntry::reply("three")]);
    let prompts = PromptAssets::default();
    let clarifier = Clarifier { gateway: &gateway, prompts: &prompts, context_budget: 8000 };
    let mut store = ThreadStore::default();
    store.ask(&clarifier, &nb, &a, "q1").await.unwrap();
    let thread_a = store.get(&a).unwrap().clone();
    store.ask(&clarifier, &nb, &b, "q2").await.unwrap();
    store.ask(&clarifier, &nb, &b, "q3").await.unwrap();
    assert_eq!(store.get(&a).unwrap(), &thread_a);
    assert_eq!(nb, before);
}

#[tokio::test]
async fn unknown_cells_empty_questions_and_orphans() {
    let (mut nb, a, _) = notebook();
    let gateway = Gateway::scripted(vec![ScriptEntry::reply("ok")]);
    let prompts = PromptAssets::default();
    let clarifier = Clarifier { gateway: &gateway, prompts: &prompts, context_budget: 8000 };
    let mut store = ThreadStore::default();
    assert!(matches!(store.ask(&clarifier, &nb, "nope", "q").await, Err(ClarifyError::UnknownCell(_))));
    assert!(matches!(store.ask(&clarifier, &nb, &a, "  ").await, Err(ClarifyError::EmptyQuestion)));
    store.ask(&clarifier, &nb, &a, "q").await.unwrap();

    nb.cells.retain(|c| c.id != a);
    assert!(matches!(store.ask(&clarifier, &nb, &a, "again").await, Err(ClarifyError::ThreadClosed(_))));
    let orphan = store.get(&a).unwrap();
    assert!(orphan.closed);
    assert_eq!(orphan.turns.len(), 1);
    assert_eq!(gateway.ledger().count(), 1);
}

#[test]
fn store_serializes_as_map() {
    let mut store = ThreadStore::default();
    store.append("cell-1", capy_core::clarifier::ClarifyTurn { question: "q".into(), answer: "a".into() });
    let v = serde_json::to_value(&store).unwrap();
    assert_eq!(v["cell-1"]["turns"][0]["answer"], "a");
    let back: ThreadStore = serde_json::from_value(v).unwrap();
    assert_eq!(back, store);
}
