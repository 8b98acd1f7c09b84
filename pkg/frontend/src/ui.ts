/** DOM rendering and event wiring. No framework: the store notifies the view,
 * which patches the parts that depend on state. Caption rows are only rebuilt
 * when their count changes so typing never loses focus. */

import { fileToSourceImage } from "./image.js";
import { AppState, SourcePick, StoryStore, Strip, canSubmit } from "./state.js";

export interface UiOptions {
  /** Edge length uploads are resized to; read from the model card. */
  frameSize: number;
  /** One-line service identity for the header. */
  statusLine: string;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) {
    node.className = className;
  }
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}

function sourceTile(source: SourcePick, caption: string): HTMLElement {
  const tile = el("figure", "tile source-tile");
  if (source.kind === "upload") {
    const img = el("img");
    img.src = `data:image/png;base64,${source.image}`;
    img.alt = "source frame";
    tile.append(img);
  } else {
    tile.append(el("div", "gallery-ref", `gallery ${source.id}`));
  }
  tile.append(el("figcaption", undefined, caption));
  return tile;
}

function frameTile(b64: string, caption: string): HTMLElement {
  const tile = el("figure", "tile frame-tile");
  const img = el("img");
  img.src = `data:image/png;base64,${b64}`;
  img.alt = caption;
  tile.append(img, el("figcaption", undefined, caption));
  return tile;
}

function stripElement(strip: Strip, slot: "current" | "previous"): HTMLElement {
  const wrap = el("section", `strip ${slot}`);
  const label = slot === "current" ? "latest" : "previous";
  wrap.append(el("h3", undefined, `${label} (${strip.modelId}, seed ${strip.seed})`));
  const tiles = el("div", "tiles");
  tiles.append(sourceTile(strip.source, strip.captions[0]));
  strip.frames.forEach((frame, i) => tiles.append(frameTile(frame, strip.captions[i + 1])));
  wrap.append(tiles);
  return wrap;
}

export class AppView {
  private readonly captionRows = el("div", "caption-rows");
  private readonly banner = el("div", "banner");
  private readonly inlineError = el("div", "inline-error");
  private readonly sourceNote = el("span", "source-note", "no source frame");
  private readonly strips = el("div", "strips");
  private readonly submitButton = el("button", "submit", "generate");
  private readonly galleryInput = el("input", "gallery-id");
  private readonly fileInput = el("input", "file-pick");
  private readonly temperatureInput = el("input", "temperature");
  private readonly topKInput = el("input", "top-k");
  private readonly seedInput = el("input", "seed");

  constructor(
    private readonly container: HTMLElement,
    private readonly store: StoryStore,
    private readonly options: UiOptions,
  ) {
    this.build();
    store.subscribe((state) => this.sync(state));
    this.sync(store.snapshot());
  }

  private build(): void {
    const state = this.store.snapshot();
    const header = el("header");
    header.append(el("h1", undefined, "story continuation"));
    header.append(el("p", "status-line", this.options.statusLine));

    const editor = el("section", "editor");
    editor.append(el("h2", undefined, "captions"));
    editor.append(el(
      "p", "hint",
      "the first caption describes the source frame; each further caption becomes one generated frame",
    ));
    editor.append(this.captionRows);
    const addButton = el("button", "add-caption", "add caption");
    addButton.addEventListener("click", () => this.store.addCaption());
    editor.append(addButton);

    const source = el("section", "source");
    source.append(el("h2", undefined, "source frame"));
    this.galleryInput.placeholder = "gallery id, e.g. train0000";
    const useGallery = el("button", "use-gallery", "use gallery frame");
    useGallery.addEventListener("click", () => {
      const id = this.galleryInput.value.trim();
      if (id) {
        this.store.setSource({ kind: "gallery", id });
      }
    });
    this.fileInput.type = "file";
    this.fileInput.accept = "image/png,image/jpeg";
    this.fileInput.addEventListener("change", () => {
      void this.pickFile();
    });
    const clear = el("button", "clear-source", "clear");
    clear.addEventListener("click", () => this.store.setSource(null));
    source.append(this.galleryInput, useGallery, this.fileInput, clear,
                  this.sourceNote, this.inlineError);

    const sampler = el("section", "sampler");
    sampler.append(el("h2", undefined, "sampler"));
    this.wireNumber(this.temperatureInput, "temperature", state.draft.sampler.temperature,
                    (v) => this.store.setSampler({ temperature: v }), 0.05);
    this.wireNumber(this.topKInput, "top_k", state.draft.sampler.top_k,
                    (v) => this.store.setSampler({ top_k: Math.round(v) }), 1);
    this.wireNumber(this.seedInput, "seed", state.draft.sampler.seed,
                    (v) => this.store.setSampler({ seed: Math.round(v) }), 1);
    sampler.append(this.temperatureInput, this.topKInput, this.seedInput);

    this.submitButton.addEventListener("click", () => {
      void this.store.submit();
    });

    this.container.append(header, this.banner, editor, source, sampler,
                          this.submitButton, this.strips);
    this.renderCaptionRows(state);
  }

  private wireNumber(input: HTMLInputElement, label: string, value: number,
                     apply: (v: number) => void, step: number): void {
    input.type = "number";
    input.step = String(step);
    input.value = String(value);
    input.title = label;
    input.addEventListener("input", () => {
      const v = Number(input.value);
      if (Number.isFinite(v)) {
        apply(v);
      }
    });
  }

  private async pickFile(): Promise<void> {
    const file = this.fileInput.files?.[0];
    if (!file) {
      return;
    }
    this.inlineError.textContent = "";
    try {
      const image = await fileToSourceImage(file, this.options.frameSize);
      this.store.setSource({ kind: "upload", name: file.name, image });
    } catch (err) {
      this.inlineError.textContent = (err as Error).message;
    }
  }

  private renderCaptionRows(state: AppState): void {
    this.captionRows.textContent = "";
    state.draft.captions.forEach((caption, index) => {
      const row = el("div", "caption-row");
      const input = el("input", "caption-text");
      input.value = caption;
      input.placeholder = index === 0 ? "source frame caption" : `frame ${index} caption`;
      input.addEventListener("input", () => this.store.setCaption(index, input.value));
      const remove = el("button", "remove-caption", "remove");
      remove.addEventListener("click", () => this.store.removeCaption(index));
      row.append(input, remove);
      this.captionRows.append(row);
    });
  }

  private sync(state: AppState): void {
    if (this.captionRows.childElementCount !== state.draft.captions.length) {
      this.renderCaptionRows(state);
    }
    this.submitButton.disabled = !canSubmit(state);
    this.submitButton.textContent =
      state.phase === "generating" ? "generating..." : "generate";

    this.banner.textContent = state.error ?? "";
    this.banner.classList.toggle("visible", state.phase === "error");

    if (state.draft.source === null) {
      this.sourceNote.textContent = "no source frame";
    } else if (state.draft.source.kind === "gallery") {
      this.sourceNote.textContent = `gallery ${state.draft.source.id}`;
    } else {
      this.sourceNote.textContent = state.draft.source.name;
    }

    this.strips.textContent = "";
    if (state.current) {
      this.strips.append(stripElement(state.current, "current"));
    }
    if (state.previous) {
      this.strips.append(stripElement(state.previous, "previous"));
    }
  }
}
