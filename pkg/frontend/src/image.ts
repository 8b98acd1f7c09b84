/** Client-side source frame preparation. */

/** Reject non-images before any decoding; shown as inline validation. */
export function validateImageFile(file: { type: string; name: string }): void {
  if (!file.type.startsWith("image/")) {
    throw new Error(`${file.name} is not an image file`);
  }
}

/** Resize an uploaded picture to the model's frame size; base64 PNG out. */
export async function fileToSourceImage(file: File, size: number): Promise<string> {
  validateImageFile(file);
  const bitmap = await createImageBitmap(file);
  try {
    const canvas = document.createElement("canvas");
    canvas.width = size;
    canvas.height = size;
    const ctx = canvas.getContext("2d");
    if (ctx === null) {
      throw new Error("canvas 2d context unavailable");
    }
    ctx.drawImage(bitmap, 0, 0, size, size);
    const dataUrl = canvas.toDataURL("image/png");
    return dataUrl.slice(dataUrl.indexOf(",") + 1);
  } finally {
    bitmap.close();
  }
}
