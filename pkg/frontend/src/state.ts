/** Draft state and the submit lifecycle.
 *
 * The phase machine is editing -> generating -> showing | error. At most one
 * request is in flight for the draft; submits while generating are ignored.
 * The previous strip is retained so two generations sit side by side, and a
 * failed submit leaves the draft exactly as typed.
 */

import { ApiError, GenerateRequest, SamplerSpec, StoryApi } from "./api.js";

export type Phase = "editing" | "generating" | "showing" | "error";

export type SourcePick =
  | { kind: "gallery"; id: string }
  | { kind: "upload"; name: string; image: string };

export interface Draft {
  captions: string[];
  source: SourcePick | null;
  sampler: SamplerSpec;
}

/** One rendered result: the source tile plus a frame per target caption. */
export interface Strip {
  captions: string[];
  frames: string[];
  source: SourcePick;
  seed: number;
  modelId: string;
}

export interface AppState {
  phase: Phase;
  draft: Draft;
  current: Strip | null;
  previous: Strip | null;
  error: string | null;
}

export function initialState(): AppState {
  return {
    phase: "editing",
    draft: {
      captions: ["", ""],
      source: null,
      sampler: { temperature: 0.9, top_k: 16, seed: 0 },
    },
    current: null,
    previous: null,
    error: null,
  };
}

export function filledCaptions(draft: Draft): string[] {
  return draft.captions.map((c) => c.trim()).filter((c) => c.length > 0);
}

/** A story needs a source frame and at least two captions (source + targets). */
export function canSubmit(state: AppState): boolean {
  return (
    state.phase !== "generating" &&
    state.draft.source !== null &&
    filledCaptions(state.draft).length >= 2
  );
}

export function toRequest(draft: Draft): GenerateRequest {
  const base = { captions: filledCaptions(draft), sampler: { ...draft.sampler } };
  if (draft.source === null) {
    throw new Error("draft has no source frame");
  }
  return draft.source.kind === "gallery"
    ? { ...base, source_id: draft.source.id }
    : { ...base, source_image: draft.source.image };
}

type Listener = (state: AppState) => void;

export class StoryStore {
  private state = initialState();
  private listeners: Listener[] = [];

  constructor(private readonly api: StoryApi) {}

  snapshot(): AppState {
    return this.state;
  }

  subscribe(listener: Listener): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private update(partial: Partial<AppState>): void {
    this.state = { ...this.state, ...partial };
    for (const listener of [...this.listeners]) {
      listener(this.state);
    }
  }

  private updateDraft(partial: Partial<Draft>): void {
    this.update({ draft: { ...this.state.draft, ...partial } });
  }

  setCaption(index: number, text: string): void {
    const captions = [...this.state.draft.captions];
    captions[index] = text;
    this.updateDraft({ captions });
  }

  addCaption(): void {
    this.updateDraft({ captions: [...this.state.draft.captions, ""] });
  }

  removeCaption(index: number): void {
    const captions = this.state.draft.captions;
    if (captions.length <= 2) {
      return;
    }
    this.updateDraft({ captions: captions.filter((_, i) => i !== index) });
  }

  setSource(source: SourcePick | null): void {
    this.updateDraft({ source });
  }

  setSampler(partial: Partial<SamplerSpec>): void {
    this.updateDraft({ sampler: { ...this.state.draft.sampler, ...partial } });
  }

  /** Issue the generation request. No-op while one is already in flight. */
  async submit(): Promise<void> {
    if (!canSubmit(this.state)) {
      return;
    }
    const draft = this.state.draft;
    const request = toRequest(draft);
    this.update({ phase: "generating", error: null });
    try {
      const response = await this.api.generate(request);
      this.update({
        phase: "showing",
        previous: this.state.current,
        current: {
          captions: request.captions,
          frames: response.frames,
          source: draft.source as SourcePick,
          seed: request.sampler.seed,
          modelId: response.model_id,
        },
        error: null,
      });
    } catch (err) {
      const detail = err instanceof ApiError ? err.message : String(err);
      this.update({ phase: "error", error: detail });
    }
  }
}
