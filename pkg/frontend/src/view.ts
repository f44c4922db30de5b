/** DOM rendering layer. Everything here is a pure function of the controller
 * state plus handler wiring; reloading the page rebuilds it all from the
 * server via the controller. */

import type { ReviewController, ControllerState } from "./controller.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className = "",
  text = "",
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text) node.textContent = text;
  return node;
}

function renderQueue(state: ControllerState, controller: ReviewController): HTMLElement {
  const root = el("section", "queue");
  const heading = el("h2", "", "Review queue");
  root.append(heading);

  const refresh = el("button", "refresh", "Refresh");
  refresh.disabled = state.busy;
  refresh.onclick = () => void controller.loadQueue();
  root.append(refresh);

  if (state.queueEmpty) {
    root.append(el("p", "empty-state", "Nothing waiting for review."));
    return root;
  }

  const table = el("table", "queue-table");
  const head = el("tr");
  for (const title of ["Sample", "Category", "Question", "Steps", ""]) {
    head.append(el("th", "", title));
  }
  table.append(head);
  for (const row of state.queue) {
    const tr = el("tr");
    tr.append(el("td", "", row.id));
    tr.append(el("td", "", row.category));
    tr.append(el("td", "question-cell", row.question));
    tr.append(el("td", "", String(row.step_count)));
    const claim = el("button", "claim", "Claim");
    claim.disabled = state.busy;
    claim.onclick = () => void controller.claim(row);
    const cell = el("td");
    cell.append(claim);
    tr.append(cell);
    table.append(tr);
  }
  root.append(table);
  return root;
}

function renderEditor(state: ControllerState, controller: ReviewController): HTMLElement {
  const editor = state.editor!;
  const root = el("section", "editor");
  root.append(el("h2", "", `Reviewing ${editor.sampleId}`));
  root.append(el("p", "question", editor.question));

  if (editor.minStepsBlocked && editor.blockMessage) {
    const warning = el("p", "min-steps-block", editor.blockMessage);
    root.append(warning);
  }

  const list = el("ol", "steps");
  editor.chain.steps.forEach((stepText, i) => {
    const index = i + 1;
    const item = el("li", editor.drafts.has(index) ? "step dirty" : "step");
    const area = el("textarea", "step-text");
    area.value = editor.drafts.get(index) ?? stepText;
    area.oninput = () => controller.setDraftStep(index, area.value);
    item.append(area);
    if (editor.drafts.has(index)) {
      item.append(el("span", "dirty-badge", "unsaved"));
      const save = el("button", "save-step", "Save step");
      save.disabled = state.busy;
      save.onclick = () => void controller.commitStep(index);
      item.append(save);
    }
    const remove = el("button", "remove-step", "Remove");
    remove.disabled = state.busy || editor.chain.steps.length <= 1;
    remove.onclick = () => void controller.removeStep(index);
    item.append(remove);
    list.append(item);
  });
  root.append(list);

  const addArea = el("textarea", "new-step-text");
  addArea.placeholder = "New step text";
  const add = el("button", "add-step", "Add step at the end");
  add.disabled = state.busy;
  add.onclick = () =>
    void controller.addStep(editor.chain.steps.length + 1, addArea.value);
  root.append(addArea, add);

  const finalLabel = el("label", "", "Final answer");
  const finalInput = el("input", "final-answer");
  finalInput.value = editor.draftFinalAnswer ?? editor.chain.final_answer;
  finalInput.oninput = () => controller.setDraftFinalAnswer(finalInput.value);
  const saveFinal = el("button", "save-final", "Save final answer");
  saveFinal.disabled = state.busy || editor.draftFinalAnswer === null;
  saveFinal.onclick = () => void controller.commitFinalAnswer();
  root.append(finalLabel, finalInput, saveFinal);

  const actions = el("div", "actions");
  const accept = el("button", "accept", "Accept");
  accept.disabled = state.busy;
  accept.onclick = () => void controller.accept();
  const reject = el("button", "reject", "Reject");
  reject.disabled = state.busy;
  reject.onclick = () => void controller.reject();
  const back = el("button", "back", "Back to queue");
  back.disabled = state.busy;
  back.onclick = () => controller.backToQueue();
  actions.append(accept, reject, back);
  root.append(actions);
  return root;
}

export function render(
  root: HTMLElement,
  state: ControllerState,
  controller: ReviewController,
): void {
  root.replaceChildren();
  if (state.error) {
    root.append(el("p", "error", state.error));
  }
  for (const toast of state.toasts.slice(-3)) {
    root.append(el("p", "toast", toast));
  }
  root.append(
    state.screen === "editor" && state.editor
      ? renderEditor(state, controller)
      : renderQueue(state, controller),
  );
}
